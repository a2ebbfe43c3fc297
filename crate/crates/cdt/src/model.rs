//! The learnable pieces: a causal convolutional encoder mapping video to a
//! Gaussian posterior over a compact latent grid, a conditional U-Net
//! denoiser predicting the clean video from a noisy one, and the adapter
//! turning a latent into per-resolution conditioning maps.
//!
//! Every module runs chunk-wise against a `CacheState`. A whole clip is the
//! degenerate stream of one big chunk over a fresh cache, so batch and
//! streaming share a single code path by construction.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    timestep_embedding, upsample_spatial_x2, upsample_temporal_causal_x2_chunk, CausalConv3d,
    FrameGroupNorm, Init, LayerCount, Linear, ParamStore, SpatialAttention,
};
use crate::rng::{randn, Purpose};
use crate::stream::CacheState;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;
const NORM_GROUPS: usize = 8;

fn default_latent_dim() -> usize {
    16
}
fn default_base_channels() -> usize {
    8
}
fn default_denoiser_mult() -> Vec<usize> {
    vec![1, 2, 4, 8]
}
fn default_encoder_mult() -> Vec<usize> {
    vec![1, 2, 4, 6]
}
fn default_injection_count() -> usize {
    4
}
fn default_t_count() -> usize {
    8192
}
fn default_lambda_kl() -> f64 {
    1e-6
}
fn default_eta_lpips() -> f64 {
    0.01
}
fn default_temb_dim() -> usize {
    128
}

/// Architecture and objective hyperparameters. Stage width i is
/// base_channels * multiplier[i]; the bottleneck reuses the deepest width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Denoiser stage multipliers, one per downsampling stage.
    #[serde(default = "default_denoiser_mult")]
    pub channel_multipliers: Vec<usize>,
    /// Encoder stage multipliers (stem stage plus three downsampled stages).
    #[serde(default = "default_encoder_mult")]
    pub encoder_multipliers: Vec<usize>,
    /// How many of the denoiser's downsampling stages receive an added
    /// condition map, counted from the full-resolution stage.
    #[serde(default = "default_injection_count")]
    pub injection_count: usize,
    /// Diffusion timestep count T.
    #[serde(default = "default_t_count")]
    pub t_count: usize,
    #[serde(default = "default_lambda_kl")]
    pub lambda_kl: f64,
    #[serde(default = "default_eta_lpips")]
    pub eta_lpips: f64,
    #[serde(default = "default_temb_dim")]
    pub temb_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: default_latent_dim(),
            base_channels: default_base_channels(),
            channel_multipliers: default_denoiser_mult(),
            encoder_multipliers: default_encoder_mult(),
            injection_count: default_injection_count(),
            t_count: default_t_count(),
            lambda_kl: default_lambda_kl(),
            eta_lpips: default_eta_lpips(),
            temb_dim: default_temb_dim(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: ~2M parameters, short diffusion table.
    pub fn toy() -> Self {
        Self { t_count: 1024, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::usage("latent_dim must be >= 1"));
        }
        if !(1..=4).contains(&self.injection_count) {
            return Err(Error::usage(format!(
                "injection_count must be in 1..=4, got {}",
                self.injection_count
            )));
        }
        if self.channel_multipliers.len() != 4 || self.encoder_multipliers.len() != 4 {
            return Err(Error::usage("channel multiplier lists must have 4 entries"));
        }
        if self.base_channels < 1 || self.t_count < 1 {
            return Err(Error::usage("base_channels and t_count must be >= 1"));
        }
        if !self.temb_dim.is_multiple_of(4) || self.temb_dim == 0 {
            return Err(Error::usage("temb_dim must be a positive multiple of 4"));
        }
        if self.lambda_kl < 0.0 || self.eta_lpips < 0.0 {
            return Err(Error::usage("loss weights must be nonnegative"));
        }
        for w in self.denoiser_widths().iter().chain(self.encoder_widths().iter()) {
            let g = NORM_GROUPS.min(*w);
            if *w == 0 || w % g != 0 {
                return Err(Error::usage(format!("stage width {w} incompatible with group norm")));
            }
        }
        Ok(())
    }

    pub fn denoiser_widths(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        self.encoder_multipliers.iter().map(|m| m * self.base_channels).collect()
    }
}

// ---------------------------------------------------------------------------
// latent posterior

/// Diagonal Gaussian over the latent grid (N, 1+F/4, H/8, W/8, latent_dim).
pub struct LatentPosterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl LatentPosterior {
    pub fn new(mean: Tensor, logvar: Tensor) -> Result<Self> {
        let logvar = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        if mean.dims() != logvar.dims() {
            return Err(Error::data("posterior mean/logvar shape mismatch"));
        }
        Ok(Self { mean, logvar })
    }

    /// Mean over elements of the KL divergence to the standard normal,
    /// 0.5*(mu^2 + e^logvar - 1 - logvar) per element.
    pub fn kl(&self) -> Result<Tensor> {
        let t = ((self.mean.sqr()? + self.logvar.exp()?)?.affine(1.0, -1.0)? - &self.logvar)?;
        Ok(t.affine(0.5, 0.0)?.mean_all()?)
    }

    /// Reparameterized draw with externally supplied standard normal noise.
    pub fn sample_with(&self, eps: &Tensor) -> Result<Tensor> {
        let std = self.logvar.affine(0.5, 0.0)?.exp()?;
        Ok((std.mul(eps)? + &self.mean)?)
    }

    /// Seeded draw; same (seed, index) always yields the same latent.
    pub fn sample(&self, seed: u64, index: u64) -> Result<Tensor> {
        let eps = randn(
            seed,
            index,
            Purpose::LatentSample,
            self.mean.dims(),
            self.mean.dtype(),
            self.mean.device(),
        )?;
        self.sample_with(&eps)
    }

    /// Deterministic mode: the posterior mean.
    pub fn mode(&self) -> Tensor {
        self.mean.clone()
    }
}

// ---------------------------------------------------------------------------
// residual block

/// Pre-norm residual block. `light` drops the second norm/conv pair, used at
/// the full-resolution stages where compute dominates. The final conv starts
/// at zero so the block is the identity map at init.
struct ResBlock {
    norm1: FrameGroupNorm,
    conv1: CausalConv3d,
    temb: Option<Linear>,
    tail: Option<(FrameGroupNorm, CausalConv3d)>,
    skip: Option<Linear>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
        light: bool,
        lc: &mut LayerCount,
    ) -> Result<Self> {
        let g = NORM_GROUPS;
        let conv1_init = if light { Init::Zeros } else { Init::ScaledNormal };
        let norm1 = FrameGroupNorm::new(ps, &format!("{name}.norm1"), cin, g)?;
        let conv1 = CausalConv3d::new(ps, &format!("{name}.conv1"), cin, cout, 1, 1, conv1_init, lc)?;
        let temb = match temb_dim {
            Some(d) => Some(Linear::new(ps, &format!("{name}.temb"), d, cout, Init::ScaledNormal)?),
            None => None,
        };
        let tail = if light {
            None
        } else {
            let norm2 = FrameGroupNorm::new(ps, &format!("{name}.norm2"), cout, g)?;
            let conv2 =
                CausalConv3d::new(ps, &format!("{name}.conv2"), cout, cout, 1, 1, Init::Zeros, lc)?;
            Some((norm2, conv2))
        };
        let skip = if cin == cout {
            None
        } else {
            Some(Linear::new(ps, &format!("{name}.skip"), cin, cout, Init::ScaledNormal)?)
        };
        Ok(Self { norm1, conv1, temb, tail, skip })
    }

    fn forward_chunk(&self, x: &Tensor, temb: Option<&Tensor>, cache: &mut CacheState) -> Result<Tensor> {
        let mut h = self.norm1.forward(x)?.silu()?;
        h = self.conv1.step(&h, cache)?;
        if let (Some(e), Some(lin)) = (temb, &self.temb) {
            let e = lin.forward(e)?;
            let (n, c) = e.dims2()?;
            h = h.broadcast_add(&e.reshape((n, 1, 1, 1, c))?)?;
        }
        if let Some((norm2, conv2)) = &self.tail {
            h = norm2.forward(&h)?.silu()?;
            h = conv2.step(&h, cache)?;
        }
        let s = match &self.skip {
            Some(lin) => lin.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

// ---------------------------------------------------------------------------
// encoder

/// Causal encoder: stem, one spatial-only 2x downsample, two joint
/// temporal+spatial 2x downsamples, then a zero-initialized posterior head.
/// Net compression is 4x in time (past the first frame) and 8x8 in space.
struct Encoder {
    stem: CausalConv3d,
    res0: ResBlock,
    down0: CausalConv3d,
    res1: ResBlock,
    down1: CausalConv3d,
    res2: ResBlock,
    down2: CausalConv3d,
    res3: ResBlock,
    head_norm: FrameGroupNorm,
    head: CausalConv3d,
    latent_dim: usize,
}

impl Encoder {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig, lc: &mut LayerCount) -> Result<Self> {
        let w = cfg.encoder_widths();
        let g = NORM_GROUPS;
        Ok(Self {
            stem: CausalConv3d::new(ps, "enc.stem", 3, w[0], 1, 1, Init::ScaledNormal, lc)?,
            res0: ResBlock::new(ps, "enc.res0", w[0], w[0], None, true, lc)?,
            down0: CausalConv3d::new(ps, "enc.down0", w[0], w[1], 1, 2, Init::ScaledNormal, lc)?,
            res1: ResBlock::new(ps, "enc.res1", w[1], w[1], None, false, lc)?,
            down1: CausalConv3d::new(ps, "enc.down1", w[1], w[2], 2, 2, Init::ScaledNormal, lc)?,
            res2: ResBlock::new(ps, "enc.res2", w[2], w[2], None, false, lc)?,
            down2: CausalConv3d::new(ps, "enc.down2", w[2], w[3], 2, 2, Init::ScaledNormal, lc)?,
            res3: ResBlock::new(ps, "enc.res3", w[3], w[3], None, false, lc)?,
            head_norm: FrameGroupNorm::new(ps, "enc.head_norm", w[3], g)?,
            head: CausalConv3d::new(ps, "enc.head", w[3], 2 * cfg.latent_dim, 1, 1, Init::Zeros, lc)?,
            latent_dim: cfg.latent_dim,
        })
    }

    fn forward_chunk(&self, x: &Tensor, cache: &mut CacheState) -> Result<(Tensor, Tensor)> {
        let mut h = self.stem.step(x, cache)?;
        h = self.res0.forward_chunk(&h, None, cache)?;
        h = self.down0.step(&h, cache)?;
        h = self.res1.forward_chunk(&h, None, cache)?;
        h = self.down1.step(&h, cache)?;
        h = self.res2.forward_chunk(&h, None, cache)?;
        h = self.down2.step(&h, cache)?;
        h = self.res3.forward_chunk(&h, None, cache)?;
        h = self.head_norm.forward(&h)?.silu()?;
        h = self.head.step(&h, cache)?;
        let mean = h.narrow(4, 0, self.latent_dim)?.contiguous()?;
        let logvar = h.narrow(4, self.latent_dim, self.latent_dim)?.contiguous()?;
        Ok((mean, logvar))
    }
}

// ---------------------------------------------------------------------------
// condition adapter

/// Four sequentially connected sub-modules, one conv each, walking the
/// latent grid back up through the denoiser's stage resolutions in reverse.
/// Sub-module k produces the map for downsampling stage 3-k.
struct ConditionAdapter {
    sub3: CausalConv3d,
    sub2: CausalConv3d,
    sub1: CausalConv3d,
    sub0: CausalConv3d,
    injection_count: usize,
}

impl ConditionAdapter {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig, lc: &mut LayerCount) -> Result<Self> {
        let w = cfg.denoiser_widths();
        Ok(Self {
            sub3: CausalConv3d::new(ps, "adp.sub3", cfg.latent_dim, w[3], 1, 1, Init::ScaledNormal, lc)?,
            sub2: CausalConv3d::new(ps, "adp.sub2", w[3], w[2], 1, 1, Init::ScaledNormal, lc)?,
            sub1: CausalConv3d::new(ps, "adp.sub1", w[2], w[1], 1, 1, Init::ScaledNormal, lc)?,
            sub0: CausalConv3d::new(ps, "adp.sub0", w[1], w[0], 1, 1, Init::ScaledNormal, lc)?,
            injection_count: cfg.injection_count,
        })
    }

    /// Maps indexed by denoiser stage: out[i] matches the input of
    /// downsampling stage i. Only the first injection_count maps are kept,
    /// but the full chain always runs since the stage-0 map needs it.
    fn forward_chunk(&self, z: &Tensor, cache: &mut CacheState, first: bool) -> Result<Vec<Tensor>> {
        let m3 = self.sub3.step(z, cache)?;
        let u = upsample_spatial_x2(&upsample_temporal_causal_x2_chunk(&m3, first)?)?;
        let m2 = self.sub2.step(&u, cache)?;
        let u = upsample_spatial_x2(&upsample_temporal_causal_x2_chunk(&m2, first)?)?;
        let m1 = self.sub1.step(&u, cache)?;
        let u = upsample_spatial_x2(&m1)?;
        let m0 = self.sub0.step(&u, cache)?;
        let mut maps = vec![m0, m1, m2, m3];
        maps.truncate(self.injection_count);
        Ok(maps)
    }
}

// ---------------------------------------------------------------------------
// denoiser

/// U-Net over (N, T, H, W, 3) predicting the clean video. Downsampling
/// strides are spatial, joint, joint, spatial; the up path mirrors them with
/// skip concatenation. Attention sits only at the bottleneck and only within
/// frames, so the whole network stays causal in time.
struct Denoiser {
    temb1: Linear,
    temb2: Linear,
    stem: CausalConv3d,
    stages: Vec<ResBlock>,
    downs: Vec<CausalConv3d>,
    mid1: ResBlock,
    mid_attn: SpatialAttention,
    mid2: ResBlock,
    ups: Vec<CausalConv3d>,
    merges: Vec<ResBlock>,
    out_norm: FrameGroupNorm,
    out_conv: CausalConv3d,
    temb_dim: usize,
    t_count: usize,
}

/// Per-stage downsample strides (temporal, spatial), shallow to deep.
const STAGE_STRIDES: [(usize, usize); 4] = [(1, 2), (2, 2), (2, 2), (1, 2)];

impl Denoiser {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig, lc: &mut LayerCount) -> Result<Self> {
        let w = cfg.denoiser_widths();
        let td = cfg.temb_dim;
        let temb1 = Linear::new(ps, "den.temb1", td / 2, td, Init::ScaledNormal)?;
        let temb2 = Linear::new(ps, "den.temb2", td, td, Init::ScaledNormal)?;
        let stem = CausalConv3d::new(ps, "den.stem", 3, w[0], 1, 1, Init::ScaledNormal, lc)?;
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for i in 0..4 {
            let light = i == 0;
            stages.push(ResBlock::new(ps, &format!("den.stage{i}"), w[i], w[i], Some(td), light, lc)?);
            let cout = if i == 3 { w[3] } else { w[i + 1] };
            let (st, ss) = STAGE_STRIDES[i];
            downs.push(CausalConv3d::new(
                ps,
                &format!("den.down{i}"),
                w[i],
                cout,
                st,
                ss,
                Init::ScaledNormal,
                lc,
            )?);
        }
        let mid1 = ResBlock::new(ps, "den.mid1", w[3], w[3], Some(td), false, lc)?;
        let mid_attn = SpatialAttention::new(ps, "den.mid_attn", w[3], NORM_GROUPS)?;
        let mid2 = ResBlock::new(ps, "den.mid2", w[3], w[3], Some(td), false, lc)?;
        let mut ups = Vec::new();
        let mut merges = Vec::new();
        for i in 0..4 {
            let cin = if i == 3 { w[3] } else { w[i + 1] };
            ups.push(CausalConv3d::new(
                ps,
                &format!("den.up{i}"),
                cin,
                w[i],
                1,
                1,
                Init::ScaledNormal,
                lc,
            )?);
            let light = i == 0;
            merges.push(ResBlock::new(
                ps,
                &format!("den.merge{i}"),
                2 * w[i],
                w[i],
                Some(td),
                light,
                lc,
            )?);
        }
        let out_norm = FrameGroupNorm::new(ps, "den.out_norm", w[0], NORM_GROUPS)?;
        let out_conv = CausalConv3d::new(ps, "den.out_conv", w[0], 3, 1, 1, Init::Zeros, lc)?;
        Ok(Self {
            temb1,
            temb2,
            stem,
            stages,
            downs,
            mid1,
            mid_attn,
            mid2,
            ups,
            merges,
            out_norm,
            out_conv,
            temb_dim: td,
            t_count: cfg.t_count,
        })
    }

    fn forward_chunk(
        &self,
        vt: &Tensor,
        maps: &[Tensor],
        ts: &[usize],
        cache: &mut CacheState,
        first: bool,
    ) -> Result<Tensor> {
        for &t in ts {
            if t < 1 || t > self.t_count {
                return Err(Error::usage(format!("timestep {t} outside 1..={}", self.t_count)));
            }
        }
        let emb = timestep_embedding(ts, self.temb_dim / 2, vt.dtype(), vt.device())?;
        let emb = self.temb2.forward(&self.temb1.forward(&emb)?.silu()?)?;
        let emb = Some(&emb);

        let mut h = self.stem.step(vt, cache)?;
        let mut skips = Vec::with_capacity(4);
        for i in 0..4 {
            if let Some(m) = maps.get(i) {
                h = (h + m)?;
            }
            h = self.stages[i].forward_chunk(&h, emb, cache)?;
            skips.push(h.clone());
            h = self.downs[i].step(&h, cache)?;
        }
        h = self.mid1.forward_chunk(&h, emb, cache)?;
        h = self.mid_attn.forward(&h)?;
        h = self.mid2.forward_chunk(&h, emb, cache)?;
        for i in (0..4).rev() {
            let (st, ss) = STAGE_STRIDES[i];
            if st == 2 {
                h = upsample_temporal_causal_x2_chunk(&h, first)?;
            }
            debug_assert_eq!(ss, 2);
            h = upsample_spatial_x2(&h)?;
            h = self.ups[i].step(&h, cache)?;
            h = Tensor::cat(&[&h, &skips[i]], 4)?;
            h = self.merges[i].forward_chunk(&h, emb, cache)?;
        }
        h = self.out_norm.forward(&h)?.silu()?;
        self.out_conv.step(&h, cache)
    }
}

// ---------------------------------------------------------------------------
// codec

/// Encoder + denoiser + adapter over one parameter store. All denoiser
/// evaluations funnel through this type so the evaluation counter is exact.
pub struct VideoCodec {
    pub config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    adapter: ConditionAdapter,
    denoiser: Denoiser,
    enc_slots: usize,
    adp_slots: usize,
    den_slots: usize,
    denoiser_calls: AtomicU64,
}

impl VideoCodec {
    pub fn new(config: ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let store = ParamStore::new(dtype, device.clone(), seed);
        Self::build(config, store)
    }

    /// Rebuild from checkpointed tensors; any mismatch between the config and
    /// the stored parameter set fails loudly.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let codec = Self::build(config, store)?;
        let stale = codec.store.untouched();
        if !stale.is_empty() {
            return Err(Error::data(format!(
                "checkpoint holds parameters unused by this config (first: {})",
                stale[0]
            )));
        }
        Ok(codec)
    }

    fn build(config: ModelConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut enc_lc = LayerCount::default();
        let encoder = Encoder::new(&mut store, &config, &mut enc_lc)?;
        let mut adp_lc = LayerCount::default();
        let adapter = ConditionAdapter::new(&mut store, &config, &mut adp_lc)?;
        let mut den_lc = LayerCount::default();
        let denoiser = Denoiser::new(&mut store, &config, &mut den_lc)?;
        Ok(Self {
            config,
            store,
            encoder,
            adapter,
            denoiser,
            enc_slots: enc_lc.0,
            adp_slots: adp_lc.0,
            den_slots: den_lc.0,
            denoiser_calls: AtomicU64::new(0),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn fresh_encoder_cache(&self) -> CacheState {
        CacheState::new(self.enc_slots)
    }

    pub fn fresh_adapter_cache(&self) -> CacheState {
        CacheState::new(self.adp_slots)
    }

    pub fn fresh_denoiser_cache(&self) -> CacheState {
        CacheState::new(self.den_slots)
    }

    fn check_video(&self, v: &Tensor, spatial_div: usize) -> Result<(usize, usize, usize, usize)> {
        let (n, t, h, w, c) = v.dims5()?;
        if c != 3 {
            return Err(Error::data(format!("expected 3 channels, got {c}")));
        }
        if t == 0 || (t - 1) % 4 != 0 {
            return Err(Error::data(format!("frame count {t} is not 1+4k")));
        }
        if h % spatial_div != 0 || w % spatial_div != 0 {
            return Err(Error::data(format!("spatial dims {h}x{w} not divisible by {spatial_div}")));
        }
        Ok((n, t, h, w))
    }

    /// Posterior over the latent grid for a whole clip (N, 1+F, H, W, 3).
    pub fn encode(&self, v: &Tensor) -> Result<LatentPosterior> {
        self.check_video(v, 8)?;
        let mut cache = self.fresh_encoder_cache();
        let (mean, logvar) = self.encoder.forward_chunk(v, &mut cache)?;
        LatentPosterior::new(mean, logvar)
    }

    /// One chunk of the streaming encoder; returns (mean, logvar) for the
    /// latent frames this chunk produces.
    pub fn encode_chunk(&self, chunk: &Tensor, cache: &mut CacheState) -> Result<(Tensor, Tensor)> {
        cache.begin_chunk();
        let (mean, logvar) = self.encoder.forward_chunk(chunk, cache)?;
        Ok((mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)?))
    }

    /// Condition maps for a whole latent, indexed by denoiser stage.
    pub fn condition_maps(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let mut cache = self.fresh_adapter_cache();
        self.adapter.forward_chunk(z, &mut cache, true)
    }

    pub fn condition_maps_chunk(
        &self,
        z_chunk: &Tensor,
        cache: &mut CacheState,
        first: bool,
    ) -> Result<Vec<Tensor>> {
        cache.begin_chunk();
        self.adapter.forward_chunk(z_chunk, cache, first)
    }

    /// Clean-video prediction for a whole noisy clip at per-sample timesteps.
    pub fn denoise(&self, vt: &Tensor, z: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let maps = self.condition_maps(z)?;
        self.denoise_with_maps(vt, &maps, ts)
    }

    /// Same, with condition maps already computed (they depend only on z, so
    /// samplers reuse them across timesteps).
    pub fn denoise_with_maps(&self, vt: &Tensor, maps: &[Tensor], ts: &[usize]) -> Result<Tensor> {
        let (n, t, _, _) = self.check_video(vt, 16)?;
        if ts.len() != n {
            return Err(Error::usage(format!("{n} batch items but {} timesteps", ts.len())));
        }
        let zt = 1 + (t - 1) / 4;
        if let Some(m) = maps.first() {
            let md = m.dims5()?;
            if md.0 != n || md.1 != t {
                return Err(Error::data(format!(
                    "condition map grid {:?} does not match video ({n}, {t}, ..)",
                    md
                )));
            }
        }
        if maps.len() == 4 && maps[3].dim(1)? != zt {
            return Err(Error::data("latent frame count inconsistent with video"));
        }
        self.denoiser_calls.fetch_add(1, Ordering::Relaxed);
        let mut cache = self.fresh_denoiser_cache();
        self.denoiser.forward_chunk(vt, maps, ts, &mut cache, true)
    }

    /// One chunk of the streaming denoiser. ts must be constant across the
    /// chunks of one pass.
    pub fn denoise_chunk(
        &self,
        vt_chunk: &Tensor,
        map_chunks: &[Tensor],
        ts: &[usize],
        cache: &mut CacheState,
        first: bool,
    ) -> Result<Tensor> {
        self.denoiser_calls.fetch_add(1, Ordering::Relaxed);
        cache.begin_chunk();
        self.denoiser.forward_chunk(vt_chunk, map_chunks, ts, cache, first)
    }

    /// Total denoiser evaluations since construction or the last reset.
    pub fn denoiser_calls(&self) -> u64 {
        self.denoiser_calls.load(Ordering::Relaxed)
    }

    pub fn reset_denoiser_calls(&self) {
        self.denoiser_calls.store(0, Ordering::Relaxed);
    }

    pub fn encoder_param_count(&self) -> usize {
        self.store.elem_count_prefix("enc.")
    }

    /// Denoiser plus adapter: everything that runs at decode time.
    pub fn decoder_param_count(&self) -> usize {
        self.store.elem_count_prefix("den.") + self.store.elem_count_prefix("adp.")
    }

    pub fn param_count(&self) -> usize {
        self.store.elem_count()
    }
}
