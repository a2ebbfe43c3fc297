//! Chunked streaming: the chunk partition rule and the per-layer feature
//! cache that makes chunk-by-chunk processing equivalent to whole-clip
//! processing.
//!
//! A (1+F)-frame clip splits into 1 + F/4 chunks of sizes (1, 4, 4, ...); in
//! latent space each chunk is a single frame. Every causal temporal layer
//! owns one cache slot: a kernel-3 stride-1 conv keeps its last 2 input
//! frames, a stride-2 temporal downsample keeps 1. A fresh cache stands for
//! the zero-padding of the initial chunk.

use candle_core::Tensor;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::VideoCodec;
use crate::rng::{normal_f64, stream, Purpose};
use crate::sampler::{ddim_step, TimeGrid};
use crate::schedule::NoiseSchedule;

/// Pixel-space chunk sizes for a (1+F)-frame clip: (1, 4, 4, ...).
pub fn chunk_sizes(frame_count: usize) -> Result<Vec<usize>> {
    if frame_count == 0 || !(frame_count - 1).is_multiple_of(4) {
        return Err(Error::data(format!(
            "cannot chunk {frame_count} frames: need 1+F with F % 4 == 0 (ragged tails rejected)"
        )));
    }
    let mut sizes = vec![1];
    sizes.extend(std::iter::repeat_n(4, (frame_count - 1) / 4));
    Ok(sizes)
}

/// Splits a (N, T, ...) tensor along the frame axis into the chunk partition.
pub fn chunk_video(v: &Tensor) -> Result<Vec<Tensor>> {
    let t = v.dim(1)?;
    let sizes = chunk_sizes(t)?;
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for s in sizes {
        out.push(v.narrow(1, at, s)?);
        at += s;
    }
    Ok(out)
}

/// Per-stream mutable state: one optional trailing-frame tensor per causal
/// layer, plus an activation-element counter used to verify that streaming
/// memory is bounded by a constant in F.
#[derive(Debug)]
pub struct CacheState {
    slots: Vec<Option<Tensor>>,
    chunk_elems: usize,
    peak_chunk_elems: usize,
}

impl CacheState {
    pub fn new(n_layers: usize) -> Self {
        Self {
            slots: vec![None; n_layers],
            chunk_elems: 0,
            peak_chunk_elems: 0,
        }
    }

    pub fn take(&mut self, layer: usize) -> Option<Tensor> {
        self.slots[layer].take()
    }

    pub fn put(&mut self, layer: usize, frames: Tensor) {
        // Detached: a cached slice must not keep the graph of the chunk that
        // produced it alive, or streaming memory grows with clip length.
        // Gradients never flow across chunk boundaries (training runs whole
        // clips through a fresh cache), so this cuts nothing that is used.
        self.slots[layer] = Some(frames.detach());
    }

    pub fn slot(&self, layer: usize) -> Option<&Tensor> {
        self.slots[layer].as_ref()
    }

    /// Forgets all trailing frames; the next chunk is treated as initial.
    pub fn reset(&mut self) {
        for s in &mut self.slots {
            *s = None;
        }
        self.chunk_elems = 0;
        self.peak_chunk_elems = 0;
    }

    pub fn begin_chunk(&mut self) {
        self.chunk_elems = 0;
    }

    /// Called by every streaming op with its output; tracks per-chunk
    /// activation volume.
    pub fn track(&mut self, t: &Tensor) {
        self.chunk_elems += t.elem_count();
        self.peak_chunk_elems = self.peak_chunk_elems.max(self.chunk_elems);
    }

    /// Peak activation elements processed within any single chunk so far.
    pub fn peak_chunk_elems(&self) -> usize {
        self.peak_chunk_elems
    }

    /// Total elements currently cached across layers.
    pub fn cached_elems(&self) -> usize {
        self.slots
            .iter()
            .map(|s| s.as_ref().map(|t| t.elem_count()).unwrap_or(0))
            .sum()
    }

    /// Cached frame count of one layer (temporal length of its slot).
    pub fn cached_frames(&self, layer: usize) -> usize {
        self.slots[layer].as_ref().map(|t| t.dim(1).unwrap()).unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// streaming drivers

/// Chunk-by-chunk latent decoding. Each incoming latent frame is denoised
/// through the full sampling grid before the next arrives, so the working
/// set is one chunk plus the per-step feature caches; nothing grows with F.
///
/// Holds one denoiser cache per grid step (features differ per noise level)
/// and a single adapter cache (condition maps depend only on z). Prior noise
/// is drawn sequentially from one stream, so chunked draws concatenate to the
/// exact whole-clip draw; that restricts streaming to batch size 1.
pub struct StreamDecoder<'a> {
    codec: &'a VideoCodec,
    sched: &'a NoiseSchedule,
    grid: TimeGrid,
    adapter_cache: CacheState,
    denoiser_caches: Vec<CacheState>,
    noise_rng: ChaCha12Rng,
    chunks_seen: usize,
}

impl<'a> StreamDecoder<'a> {
    pub fn new(
        codec: &'a VideoCodec,
        sched: &'a NoiseSchedule,
        n_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if sched.t_count() != codec.config.t_count {
            return Err(Error::usage("schedule length does not match model config"));
        }
        let grid = TimeGrid::uniform(sched.t_count(), n_steps)?;
        let denoiser_caches = (0..n_steps).map(|_| codec.fresh_denoiser_cache()).collect();
        Ok(Self {
            codec,
            sched,
            grid,
            adapter_cache: codec.fresh_adapter_cache(),
            denoiser_caches,
            noise_rng: stream(seed, 0, Purpose::PriorInit),
            chunks_seen: 0,
        })
    }

    /// Decode one latent frame (1, 1, h, w, c) into its pixel chunk
    /// (1, 1 or 4, 8h, 8w, 3).
    pub fn decode_chunk(&mut self, z_chunk: &Tensor) -> Result<Tensor> {
        let (n, zt, zh, zw, _) = z_chunk.dims5()?;
        if n != 1 || zt != 1 {
            return Err(Error::usage("streaming decode takes one latent frame of one clip at a time"));
        }
        let first = self.chunks_seen == 0;
        let frames = if first { 1 } else { 4 };
        let (h, w) = (8 * zh, 8 * zw);
        let noise = normal_f64(&mut self.noise_rng, frames * h * w * 3);
        let mut v = Tensor::from_vec(noise, (1, frames, h, w, 3), z_chunk.device())?
            .to_dtype(z_chunk.dtype())?;
        let maps: Vec<Tensor> = self
            .codec
            .condition_maps_chunk(z_chunk, &mut self.adapter_cache, first)?
            .iter()
            .map(|m| m.detach())
            .collect();
        for (i, (t_cur, t_prev)) in self.grid.pairs_desc().enumerate() {
            let cache = &mut self.denoiser_caches[i];
            let x0 = self.codec.denoise_chunk(&v, &maps, &[t_cur], cache, first)?;
            // detach per step so one chunk never holds more than one
            // denoiser graph at a time
            v = ddim_step(&v, &x0, t_cur, t_prev, self.sched)?.detach();
        }
        self.chunks_seen += 1;
        Ok(v)
    }

    /// Elements held in feature caches right now; the constant-memory claim
    /// is about this number staying flat as more chunks arrive.
    pub fn cached_elems(&self) -> usize {
        self.adapter_cache.cached_elems()
            + self.denoiser_caches.iter().map(|c| c.cached_elems()).sum::<usize>()
    }

    /// Largest per-chunk activation footprint seen so far.
    pub fn peak_chunk_elems(&self) -> usize {
        self.denoiser_caches.iter().map(|c| c.peak_chunk_elems()).max().unwrap_or(0)
    }
}

/// Chunk-by-chunk encode + decode: push pixel chunks in, get reconstructed
/// pixel chunks out, with every stage running causally behind its cache.
pub struct StreamReconstructor<'a> {
    codec: &'a VideoCodec,
    encoder_cache: CacheState,
    decoder: StreamDecoder<'a>,
}

impl<'a> StreamReconstructor<'a> {
    pub fn new(
        codec: &'a VideoCodec,
        sched: &'a NoiseSchedule,
        n_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            codec,
            encoder_cache: codec.fresh_encoder_cache(),
            decoder: StreamDecoder::new(codec, sched, n_steps, seed)?,
        })
    }

    /// Chunk sizes must follow the (1, 4, 4, ...) partition in order.
    pub fn push_chunk(&mut self, pixel_chunk: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.codec.encode_chunk(pixel_chunk, &mut self.encoder_cache)?;
        self.decoder.decode_chunk(&mean)
    }

    pub fn cached_elems(&self) -> usize {
        self.encoder_cache.cached_elems() + self.decoder.cached_elems()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn chunk_rule() {
        assert_eq!(chunk_sizes(17).unwrap(), vec![1, 4, 4, 4, 4]);
        assert_eq!(chunk_sizes(1).unwrap(), vec![1]);
        assert_eq!(chunk_sizes(9).unwrap(), vec![1, 4, 4]);
        assert!(chunk_sizes(8).is_err());
        assert!(chunk_sizes(0).is_err());
    }

    #[test]
    fn chunks_reassemble_bit_for_bit() {
        let dev = Device::Cpu;
        let v = crate::rng::randn(0, 0, crate::rng::Purpose::NoiseDraw, &[2, 9, 4, 4, 3], DType::F32, &dev)
            .unwrap();
        let chunks = chunk_video(&v).unwrap();
        assert_eq!(chunks.len(), 3);
        let refs: Vec<&Tensor> = chunks.iter().collect();
        let back = Tensor::cat(&refs, 1).unwrap();
        let a = v.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    fn tiny_codec(seed: u64) -> VideoCodec {
        let cfg = crate::model::ModelConfig {
            latent_dim: 3,
            base_channels: 2,
            channel_multipliers: vec![1, 1, 2, 2],
            encoder_multipliers: vec![1, 1, 1, 2],
            t_count: 16,
            temb_dim: 8,
            ..crate::model::ModelConfig::default()
        };
        VideoCodec::new(cfg, DType::F32, &Device::Cpu, seed).unwrap()
    }

    #[test]
    fn stream_reconstruct_matches_batch() {
        let codec = tiny_codec(21);
        // bump every parameter off its init so zero-initialized heads cannot
        // make both paths trivially produce zeros
        for (i, (_, var)) in codec.store().iter().enumerate() {
            let t = var.as_tensor();
            let nudge = crate::rng::randn(
                211,
                i as u64,
                crate::rng::Purpose::WeightInit,
                t.dims(),
                t.dtype(),
                t.device(),
            )
            .unwrap();
            var.set(&(t + nudge.affine(0.05, 0.0).unwrap()).unwrap()).unwrap();
        }
        let sched = crate::schedule::cosine_schedule(16).unwrap();
        let v = crate::rng::randn(3, 0, crate::rng::Purpose::ClipGen, &[1, 9, 16, 16, 3], DType::F32, &Device::Cpu)
            .unwrap();
        let batch = crate::sampler::reconstruct(&codec, &sched, &v, 2, 99).unwrap();
        let peak = batch.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(peak > 1e-3, "reconstruction degenerate, comparison vacuous");

        let mut rec = StreamReconstructor::new(&codec, &sched, 2, 99).unwrap();
        let mut outs = Vec::new();
        for chunk in chunk_video(&v).unwrap() {
            outs.push(rec.push_chunk(&chunk).unwrap());
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let streamed = Tensor::cat(&refs, 1).unwrap();
        assert_eq!(streamed.dims(), batch.dims());
        let a = batch.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = streamed.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let max = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(max <= 1e-4, "stream vs batch reconstruct: {max}");
    }

    /// Cache memory after warm-up is the same no matter how long the clip
    /// runs: the footprint depends on resolution and step count only.
    #[test]
    fn stream_memory_is_constant_in_clip_length() {
        let codec = tiny_codec(22);
        let sched = crate::schedule::cosine_schedule(16).unwrap();
        let mut footprints = Vec::new();
        for f in [8usize, 16, 24] {
            let v = crate::rng::randn(4, f as u64, crate::rng::Purpose::ClipGen, &[1, 1 + f, 16, 16, 3], DType::F32, &Device::Cpu)
                .unwrap();
            let mut rec = StreamReconstructor::new(&codec, &sched, 2, 1).unwrap();
            let mut peak = 0usize;
            for chunk in chunk_video(&v).unwrap() {
                rec.push_chunk(&chunk).unwrap();
                peak = peak.max(rec.cached_elems());
            }
            footprints.push(peak);
        }
        assert_eq!(footprints[0], footprints[1]);
        assert_eq!(footprints[1], footprints[2]);
        assert!(footprints[0] > 0);
    }

    #[test]
    fn stream_decoder_rejects_batches_and_multi_frames() {
        let codec = tiny_codec(23);
        let sched = crate::schedule::cosine_schedule(16).unwrap();
        let mut dec = StreamDecoder::new(&codec, &sched, 1, 0).unwrap();
        let two_frames = Tensor::zeros((1, 2, 2, 2, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(dec.decode_chunk(&two_frames).is_err());
        let batch = Tensor::zeros((2, 1, 2, 2, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(dec.decode_chunk(&batch).is_err());
    }

    #[test]
    fn cache_state_bookkeeping() {
        let dev = Device::Cpu;
        let mut c = CacheState::new(2);
        assert!(c.take(0).is_none());
        let t = Tensor::zeros((1, 2, 4, 4, 8), DType::F32, &dev).unwrap();
        c.put(0, t.clone());
        assert_eq!(c.cached_frames(0), 2);
        assert_eq!(c.cached_elems(), 256);
        c.begin_chunk();
        c.track(&t);
        assert_eq!(c.peak_chunk_elems(), 256);
        c.reset();
        assert!(c.take(0).is_none());
        assert_eq!(c.cached_elems(), 0);
    }
}
