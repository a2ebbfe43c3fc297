/* Score reconstructions over a held-out split and dump the full report.

   Runs every clip of the split through encode and decode, then reports
   per-clip and aggregate PSNR / SSIM / perceptual distance, decode timing,
   and the per-channel statistics of the latent posterior means (healthy
   latents sit near zero mean with moderate variance).

   cargo run --release --example evaluate_model -- runs/toy/latest data/toy/manifest.toml val 8
*/

use candle_core::{Device, Tensor};
use cdt::ckpt::load_codec;
use cdt::data::{load_clip, DatasetManifest};
use cdt::metrics::evaluate;
use cdt::perceptual::PerceptualNet;
use cdt::schedule::cosine_schedule;
use cdt::Result;

fn main() -> Result<()> {
    let dev = Device::Cpu;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = args.first().map(String::as_str).unwrap_or("runs/toy/latest");
    let data = args.get(1).map(String::as_str).unwrap_or("data/toy/manifest.toml");
    let split = args.get(2).map(String::as_str).unwrap_or("val");
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);

    let (codec, manifest) = load_codec(ckpt, &dev)?;
    let sched = cosine_schedule(manifest.model.t_count)?;
    let net = PerceptualNet::bundled(&dev)?;

    let dataset = DatasetManifest::load(data)?;
    let clips: Vec<(String, Tensor)> = dataset
        .split(split)
        .map(|e| {
            load_clip(e, &dataset.base_dir, &dataset.preprocess, &dev)
                .map(|v| (e.path.clone(), v.tensor().clone()))
        })
        .collect::<Result<_>>()?;
    println!("{} clips in split '{split}'", clips.len());

    let report = evaluate(&codec, &sched, &net, &clips, steps, 0)?;
    println!("{:<12} {:>9} {:>8} {:>8}", "clip", "psnr dB", "ssim", "lpips");
    for c in &report.clips {
        println!("{:<12} {:>9.2} {:>8.4} {:>8.4}", c.name, c.psnr, c.ssim, c.lpips);
    }
    println!(
        "aggregate: psnr {:.2} dB, ssim {:.4}, lpips {:.4} ({:.1}s decoding)",
        report.mean_psnr, report.mean_ssim, report.mean_lpips, report.decode_seconds
    );
    println!("latent mean by channel: {:?}", report.latent_mean.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("latent var  by channel: {:?}", report.latent_var.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    Ok(())
}
