/* Trade reconstruction quality against decoding speed.

   The deterministic sampler walks a time grid with N waypoints, spending
   exactly N denoiser evaluations per latent chunk. This decodes the same
   latent at several N and reports quality and wall-clock so the knee of the
   curve is visible. Works best with a trained checkpoint; fresh weights
   still show the linear cost scaling.

   cargo run --release --example decode_steps -- runs/toy/latest data/toy/clip_0000
*/

use candle_core::{DType, Device};
use cdt::ckpt::load_codec;
use cdt::cli::read_clip;
use cdt::metrics::psnr;
use cdt::model::{ModelConfig, VideoCodec};
use cdt::rng::{randn, Purpose};
use cdt::sampler::decode_latent;
use cdt::schedule::cosine_schedule;
use cdt::Result;

fn main() -> Result<()> {
    let dev = Device::Cpu;
    let args: Vec<String> = std::env::args().skip(1).collect();

    let (codec, t_count) = match args.first() {
        Some(dir) => {
            let (codec, m) = load_codec(dir, &dev)?;
            let t = m.model.t_count;
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
        None => randn(2, 0, Purpose::ClipGen, &[9, 64, 64, 3], DType::F32, &dev)?
            .clamp(-1.0, 1.0)?,
    };
    let batched = clip.unsqueeze(0)?;
    let z = codec.encode(&batched)?.mode();

    println!("{:>6} {:>10} {:>12} {:>10}", "steps", "psnr dB", "den. calls", "seconds");
    for n in [1usize, 2, 4, 8, 16] {
        codec.reset_denoiser_calls();
        let t0 = std::time::Instant::now();
        let recon = decode_latent(&codec, &sched, &z, n, 0)?;
        let secs = t0.elapsed().as_secs_f64();
        let quality = psnr(&batched, &recon)?;
        println!("{n:>6} {quality:>10.2} {:>12} {secs:>10.2}", codec.denoiser_calls());
    }
    Ok(())
}
