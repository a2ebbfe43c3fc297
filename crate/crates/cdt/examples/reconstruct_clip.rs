/* Round-trip a clip through the tokenizer: encode, then decode from pure
   noise conditioned on the latents, and write the frames back as PNGs.

   Decoding starts from a standard normal video and runs the deterministic
   sampler for --steps denoiser evaluations per chunk; more steps cost
   linearly more time. With fresh weights the output is gray, so point this
   at a checkpoint from train_toy or the train command for real output.

   cargo run --release --example reconstruct_clip -- runs/toy/latest data/toy/clip_0000 out/recon 8
   (arguments: checkpoint_dir clip_dir out_dir steps, all optional)
*/

use candle_core::{DType, Device};
use cdt::ckpt::load_codec;
use cdt::cli::{read_clip, write_clip};
use cdt::metrics::psnr;
use cdt::model::{ModelConfig, VideoCodec};
use cdt::rng::{randn, Purpose};
use cdt::sampler::reconstruct;
use cdt::schedule::cosine_schedule;
use cdt::Result;

fn main() -> Result<()> {
    let dev = Device::Cpu;
    let args: Vec<String> = std::env::args().skip(1).collect();

    let (codec, t_count) = match args.first() {
        Some(dir) => {
            let (codec, manifest) = load_codec(dir, &dev)?;
            println!("checkpoint at step {}", manifest.step);
            let t = manifest.model.t_count;
            (codec, t)
        }
        None => {
            println!("no checkpoint given, using fresh weights");
            let cfg = ModelConfig::toy();
            let t = cfg.t_count;
            (VideoCodec::new(cfg, DType::F32, &dev, 0)?, t)
        }
    };
    let sched = cosine_schedule(t_count)?;

    let clip = match args.get(1) {
        Some(dir) => read_clip(dir.as_ref(), &dev)?.tensor().clone(),
        None => randn(1, 0, Purpose::ClipGen, &[9, 64, 64, 3], DType::F32, &dev)?
            .clamp(-1.0, 1.0)?,
    };
    let out = args.get(2).map(String::as_str).unwrap_or("out/recon");
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);

    codec.reset_denoiser_calls();
    let t0 = std::time::Instant::now();
    let recon = reconstruct(&codec, &sched, &clip.unsqueeze(0)?, steps, 0)?.squeeze(0)?;
    let secs = t0.elapsed().as_secs_f64();

    write_clip(out.as_ref(), &recon)?;
    println!("wrote {} frames to {out}", recon.dims()[0]);
    println!("psnr: {:.2} dB", psnr(&clip, &recon)?);
    println!("denoiser_calls={} in {secs:.2}s", codec.denoiser_calls());
    Ok(())
}
