/* Train a small model end to end on synthetic clips.

   Generates a dataset if none exists, then runs the two-stage curriculum:
   stage 1 optimizes diffusion + KL on short clips, stage 2 adds the
   perceptual term on full-length clips. Progress lands in stdout and
   checkpoints in the output directory; resume by rerunning with the same
   arguments after an interruption.

   cargo run --release --example train_toy -- 400 data/toy runs/toy
   (arguments: steps data_dir out_dir, all optional)
*/

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use cdt::ckpt::{load_checkpoint, save_checkpoint};
use cdt::data::{load_split, make_synthetic_dataset, DatasetManifest};
use cdt::model::{ModelConfig, VideoCodec};
use cdt::perceptual::PerceptualNet;
use cdt::schedule::cosine_schedule;
use cdt::train::{train_loop, StageConfig, TrainConfig, TrainState};
use cdt::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().map(|s| s.parse().unwrap()).unwrap_or(400);
    let data_dir = args.get(1).map(String::as_str).unwrap_or("data/toy");
    let out_dir = args.get(2).map(String::as_str).unwrap_or("runs/toy");
    let dev = Device::Cpu;

    let manifest_path = Path::new(data_dir).join("manifest.toml");
    if !manifest_path.is_file() {
        println!("generating 64 synthetic clips under {data_dir}");
        make_synthetic_dataset(0, 64, 64, 9, data_dir)?;
    }
    let manifest = DatasetManifest::load(&manifest_path)?;
    let clips: Vec<Tensor> =
        load_split(&manifest, "train", &dev)?.into_iter().map(|v| v.tensor().clone()).collect();
    println!("{} training clips", clips.len());

    let stage2 = (steps / 2).max(1);
    let stage1 = steps.saturating_sub(stage2).max(1);
    let cfg = TrainConfig {
        seed: 0,
        lr: 3e-4,
        warmup_steps: (steps / 20).max(10),
        log_every: 20,
        checkpoint_every: 200,
        stages: vec![
            StageConfig { steps: stage1, frames: 5, eta_lpips: 0.0 },
            StageConfig { steps: stage2, frames: 9, eta_lpips: 0.01 },
        ],
        ..TrainConfig::default()
    };

    let latest = Path::new(out_dir).join("latest");
    let mut state = if latest.join("manifest.toml").is_file() {
        let (state, _) = load_checkpoint(&latest, &dev)?;
        println!("resuming from step {}", state.step);
        state
    } else {
        let codec = VideoCodec::new(ModelConfig::toy(), DType::F32, &dev, cfg.seed)?;
        println!("fresh model with {} parameters", codec.param_count());
        TrainState::new(codec, cosine_schedule(ModelConfig::toy().t_count)?)?
    };

    let net = PerceptualNet::bundled(&dev)?;
    let mut log = std::io::stdout();
    train_loop(&mut state, &cfg, &clips, Some(&net), &mut log, |s| {
        save_checkpoint(&latest, s, Some(&cfg))?;
        println!("checkpoint at step {}", s.step);
        Ok(())
    })?;
    println!("done: step {} ema loss {:.6}", state.step, state.ema_loss);
    Ok(())
}
