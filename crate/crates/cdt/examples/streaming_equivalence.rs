/* Show that chunkwise streaming matches whole-clip processing.

   The same model reconstructs a clip twice: once with every frame in memory,
   once fed chunk by chunk (1 frame, then 4, 4, ...) through feature caches.
   The two outputs agree to float precision, and the cache footprint stays
   flat as the clip grows, which is the property that makes live encoding
   possible.

   cargo run --example streaming_equivalence
*/

use candle_core::{DType, Device};
use cdt::model::{ModelConfig, VideoCodec};
use cdt::rng::{randn, Purpose};
use cdt::sampler::reconstruct;
use cdt::schedule::cosine_schedule;
use cdt::stream::{chunk_video, StreamReconstructor};
use cdt::Result;

fn main() -> Result<()> {
    let dev = Device::Cpu;
    let cfg = ModelConfig { t_count: 64, ..ModelConfig::toy() };
    let codec = VideoCodec::new(cfg, DType::F32, &dev, 7)?;
    let sched = cosine_schedule(64)?;
    let n_steps = 4;

    // fresh output heads are zero-initialized; bump all weights so the
    // comparison runs on non-trivial activations
    for (i, (_, var)) in codec.store().iter().enumerate() {
        let t = var.as_tensor();
        let nudge = randn(42, i as u64, Purpose::WeightInit, t.dims(), t.dtype(), t.device())?;
        var.set(&(t + nudge.affine(0.05, 0.0)?)?)?;
    }

    // equivalence on one clip
    let v = randn(1, 0, Purpose::ClipGen, &[1, 9, 32, 32, 3], DType::F32, &dev)?
        .clamp(-1.0, 1.0)?;
    let batch = reconstruct(&codec, &sched, &v, n_steps, 123)?;

    let mut rec = StreamReconstructor::new(&codec, &sched, n_steps, 123)?;
    let mut parts = Vec::new();
    for chunk in chunk_video(&v)? {
        parts.push(rec.push_chunk(&chunk)?);
    }
    let refs: Vec<&candle_core::Tensor> = parts.iter().collect();
    let streamed = candle_core::Tensor::cat(&refs, 1)?;

    let diff = (batch - streamed)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("max |batch - streamed| over 9 frames: {diff:.2e}");

    // cache footprint across clip lengths
    println!("{:>8} {:>16}", "frames", "cached f32 vals");
    for frames in [5usize, 9, 17, 33] {
        let v = randn(1, frames as u64, Purpose::ClipGen, &[1, frames, 32, 32, 3], DType::F32, &dev)?
            .clamp(-1.0, 1.0)?;
        let mut rec = StreamReconstructor::new(&codec, &sched, n_steps, 5)?;
        let mut peak = 0usize;
        for chunk in chunk_video(&v)? {
            rec.push_chunk(&chunk)?;
            peak = peak.max(rec.cached_elems());
        }
        println!("{frames:>8} {peak:>16}");
    }
    println!("constant cache size = memory does not grow with the clip");
    Ok(())
}
