/* Encode a clip into the Gaussian latent space and look at the posterior.

   The encoder maps (1+F, H, W, 3) pixels to (1+F/4, H/8, W/8, 16) latent
   means and log-variances: a fresh frame chunk of 4x64x64 RGB frames becomes
   one 8x8x16 latent frame, a 48x compression. Without a checkpoint the
   weights are freshly initialized, which still demonstrates shapes, sampling
   and the KL term; pass a checkpoint directory for trained statistics.

   cargo run --example encode_video -- [checkpoint_dir] [clip_dir]
*/

use candle_core::{DType, Device, Tensor};
use cdt::ckpt::load_codec;
use cdt::data::synth_clip;
use cdt::model::{ModelConfig, VideoCodec};
use cdt::Result;

fn clip_from_synth(res: usize, frames: usize, dev: &Device) -> Result<Tensor> {
    let raw = synth_clip(0, 0, res, frames);
    let mut data = Vec::with_capacity(frames * res * res * 3);
    for frame in &raw.frames {
        data.extend(frame.iter().map(|&b| b as f32 / 127.5 - 1.0));
    }
    Ok(Tensor::from_vec(data, (frames, res, res, 3), dev)?)
}

fn main() -> Result<()> {
    let dev = Device::Cpu;
    let args: Vec<String> = std::env::args().skip(1).collect();

    let codec = match args.first() {
        Some(dir) => {
            let (codec, manifest) = load_codec(dir, &dev)?;
            println!("loaded checkpoint at step {}", manifest.step);
            codec
        }
        None => {
            println!("no checkpoint given, using fresh weights");
            VideoCodec::new(ModelConfig::toy(), DType::F32, &dev, 0)?
        }
    };

    let clip = match args.get(1) {
        Some(dir) => cdt::cli::read_clip(dir.as_ref(), &dev)?.tensor().clone(),
        None => clip_from_synth(64, 9, &dev)?,
    };
    let (t, h, w, _) = clip.dims4()?;
    println!("clip: {t} frames at {w}x{h}");

    let post = codec.encode(&clip.unsqueeze(0)?)?;
    println!("latent mean shape: {:?}", post.mean.dims());
    let pixels = t * h * w * 3;
    let latents: usize = post.mean.dims().iter().product();
    println!("compression: {pixels} pixel values -> {latents} latent values ({:.1}x)", pixels as f64 / latents as f64);

    let kl = post.kl()?.to_scalar::<f32>()?;
    println!("kl to standard normal: {kl:.6}");

    let mode = post.mode();
    let sample = post.sample(0, 0)?;
    let spread = (sample - &mode)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("max |sample - mean|: {spread:.4}");

    let mstats = post.mean.flatten_all()?.to_vec1::<f32>()?;
    let mean = mstats.iter().map(|&v| v as f64).sum::<f64>() / mstats.len() as f64;
    let var = mstats.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / mstats.len() as f64;
    println!("posterior mean stats: mean {mean:.4}, var {var:.4}");
    Ok(())
}
