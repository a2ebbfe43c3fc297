//! Joint training of encoder and decoder: the SNR-weighted clean-video
//! diffusion loss plus weighted KL and perceptual terms, a two-stage
//! curriculum that switches the perceptual term on, hybrid image/video
//! batches, and a serializable Adam optimizer.
//!
//! All per-step randomness (timesteps, noise, latent draws, batch order) is
//! keyed by (seed, step), never by mutable RNG state, so resuming from step k
//! reproduces the uninterrupted run exactly.

use std::io::Write;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VideoCodec;
use crate::perceptual::PerceptualNet;
use crate::rng::{randn, stream, Purpose};
use crate::schedule::{snr_weight, NoiseSchedule};

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageConfig {
    pub steps: usize,
    /// Frames per video batch item (1 + F), drawn from the clip head.
    pub frames: usize,
    /// Perceptual-loss weight while this stage runs.
    pub eta_lpips: f64,
}

fn default_batch_size() -> usize {
    1
}
fn default_image_prob() -> f64 {
    0.25
}
fn default_lr() -> f64 {
    1e-4
}
fn default_warmup() -> usize {
    200
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_log_every() -> usize {
    50
}
fn default_checkpoint_every() -> usize {
    1000
}
fn default_stages() -> Vec<StageConfig> {
    vec![
        StageConfig { steps: 2500, frames: 5, eta_lpips: 0.0 },
        StageConfig { steps: 2500, frames: 9, eta_lpips: 0.01 },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Probability that a step draws single frames instead of clips.
    #[serde(default = "default_image_prob")]
    pub image_batch_prob: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_stages")]
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: default_batch_size(),
            image_batch_prob: default_image_prob(),
            lr: default_lr(),
            warmup_steps: default_warmup(),
            grad_clip: default_grad_clip(),
            log_every: default_log_every(),
            checkpoint_every: default_checkpoint_every(),
            stages: default_stages(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::usage("training needs at least one stage"));
        }
        for s in &self.stages {
            if s.steps == 0 {
                return Err(Error::usage("stage step counts must be positive"));
            }
            if s.frames == 0 || (s.frames - 1) % 4 != 0 {
                return Err(Error::usage(format!("stage frame count {} is not 1+4k", s.frames)));
            }
            if s.eta_lpips < 0.0 {
                return Err(Error::usage("eta_lpips must be nonnegative"));
            }
        }
        // the warm-up stage always runs without the perceptual term
        if self.stages.len() > 1 && self.stages[0].eta_lpips != 0.0 {
            return Err(Error::usage("stage 1 must run with eta_lpips = 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.image_batch_prob) {
            return Err(Error::usage("image_batch_prob must be in [0, 1]"));
        }
        if self.lr <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::usage("lr and grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// (stage index, stage, first global step of that stage).
    pub fn stage_at(&self, step: usize) -> (usize, &StageConfig, usize) {
        let mut start = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if step < start + s.steps {
                return (i, s, start);
            }
            start += s.steps;
        }
        let i = self.stages.len() - 1;
        (i, &self.stages[i], start - self.stages[i].steps)
    }
}

// ---------------------------------------------------------------------------
// losses

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub diffusion: f64,
    pub kl: f64,
    pub lpips: f64,
    pub total: f64,
}

/// SNR-weighted clean-video loss given a prediction: mean over the batch of
/// alpha_bar/(1-alpha_bar) at each item's timestep times that item's MSE.
pub fn diffusion_loss_from_prediction(
    v0: &Tensor,
    v0_hat: &Tensor,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if v0.dims() != v0_hat.dims() {
        return Err(Error::data(format!(
            "prediction shape {:?} does not match target {:?}",
            v0_hat.dims(),
            v0.dims()
        )));
    }
    let n = v0.dim(0)?;
    if ts.len() != n {
        return Err(Error::usage(format!("{n} batch items but {} timesteps", ts.len())));
    }
    let per_item = (v0 - v0_hat)?.sqr()?.reshape((n, ()))?.mean(1)?;
    let weights: Vec<f64> = ts.iter().map(|&t| snr_weight(t, sched)).collect::<Result<_>>()?;
    let w = Tensor::from_vec(weights, n, v0.device())?.to_dtype(v0.dtype())?;
    Ok(per_item.mul(&w)?.mean_all()?)
}

/// Noise a batch where each item carries its own timestep.
pub fn q_sample_batch(
    v0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let n = v0.dim(0)?;
    if ts.len() != n || v0.dims() != eps.dims() {
        return Err(Error::data("q_sample batch shape mismatch"));
    }
    let mut ab_sqrt = Vec::with_capacity(n);
    let mut om_sqrt = Vec::with_capacity(n);
    for &t in ts {
        sched_check(sched, t)?;
        let ab = sched.alpha_bar(t);
        ab_sqrt.push(ab.sqrt());
        om_sqrt.push((1.0 - ab).sqrt());
    }
    let shape = (n, 1, 1, 1, 1);
    let a = Tensor::from_vec(ab_sqrt, shape, v0.device())?.to_dtype(v0.dtype())?;
    let b = Tensor::from_vec(om_sqrt, shape, v0.device())?.to_dtype(v0.dtype())?;
    Ok((v0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

fn sched_check(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t < 1 || t > sched.t_count() {
        return Err(Error::usage(format!("timestep {t} outside 1..={}", sched.t_count())));
    }
    Ok(())
}

/// Full objective: diffusion + lambda*KL + eta*perceptual, the perceptual
/// term measured between the clean clip and the single-step prediction.
/// Returns the differentiable total and the per-term scalar breakdown.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    codec: &VideoCodec,
    sched: &NoiseSchedule,
    perceptual: Option<&PerceptualNet>,
    v0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    latent_eps: &Tensor,
    lambda: f64,
    eta: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let post = codec.encode(v0)?;
    let z = post.sample_with(latent_eps)?;
    let vt = q_sample_batch(v0, ts, eps, sched)?;
    let v0_hat = codec.denoise(&vt, &z, ts)?;

    let diffusion = diffusion_loss_from_prediction(v0, &v0_hat, ts, sched)?;
    let kl = post.kl()?;
    let mut breakdown = LossBreakdown {
        diffusion: scalar_f64(&diffusion)?,
        kl: scalar_f64(&kl)?,
        ..Default::default()
    };
    let mut total = (diffusion + kl.affine(lambda, 0.0)?)?;
    if eta > 0.0 {
        let net = perceptual.ok_or_else(|| {
            Error::data("perceptual term enabled but no perceptual weights are loaded")
        })?;
        let lp = net.distance(v0, &v0_hat)?;
        breakdown.lpips = scalar_f64(&lp)?;
        total = (total + lp.affine(eta, 0.0)?)?;
    }
    breakdown.total = scalar_f64(&total)?;
    Ok((total, breakdown))
}

fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam with bias correction and global-norm gradient clipping. Moments are
/// plain tensors in parameter order, so checkpoints can round-trip them.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: usize,
}

impl Adam {
    pub fn new(vars: &[Var]) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| Tensor::zeros(v.as_tensor().dims(), v.as_tensor().dtype(), v.as_tensor().device()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v2 = m.clone();
        Ok(Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v: v2, steps: 0 })
    }

    pub fn from_moments(m: Vec<Tensor>, v: Vec<Tensor>, steps: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, steps }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update over all vars. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, vars: &[Var], grads: &GradStore, lr: f64, clip: f64) -> Result<f64> {
        if vars.len() != self.m.len() {
            return Err(Error::usage("optimizer moment count does not match parameters"));
        }
        let norm = global_grad_norm(vars, grads)?;
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, var) in vars.iter().enumerate() {
            let g = grads
                .get(var.as_tensor())
                .ok_or_else(|| Error::numeric("a parameter received no gradient"))?
                .affine(scale, 0.0)?;
            // Detach on store: the update arithmetic references the gradient, which
            // references the whole forward graph. Keeping that op chain on the moments
            // would retain every step's activations for the lifetime of the optimizer.
            self.m[i] = (self.m[i].affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?.detach();
            self.v[i] = (self.v[i].affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?.detach();
            let mhat = self.m[i].affine(1.0 / bc1, 0.0)?;
            let vhat = self.v[i].affine(1.0 / bc2, 0.0)?;
            let upd = mhat.div(&vhat.sqrt()?.affine(1.0, self.eps)?)?;
            var.set(&(var.as_tensor() - upd.affine(lr, 0.0)?)?)?;
        }
        Ok(norm)
    }
}

pub fn global_grad_norm(vars: &[Var], grads: &GradStore) -> Result<f64> {
    let mut acc = 0f64;
    for var in vars {
        if let Some(g) = grads.get(var.as_tensor()) {
            acc += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(acc.sqrt())
}

/// Linear warm-up then cosine decay to zero over the remaining steps.
pub fn lr_at(step: usize, total_steps: usize, base: f64, warmup: usize) -> f64 {
    let warmup = warmup.min(total_steps.saturating_sub(1));
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let u = (step - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
}

// ---------------------------------------------------------------------------
// training loop

pub struct TrainState {
    pub codec: VideoCodec,
    pub sched: NoiseSchedule,
    pub opt: Adam,
    /// Completed optimization steps.
    pub step: usize,
    /// Exponentially smoothed total loss.
    pub ema_loss: f64,
}

impl TrainState {
    pub fn new(codec: VideoCodec, sched: NoiseSchedule) -> Result<Self> {
        let opt = Adam::new(&codec.store().vars())?;
        Ok(Self { codec, sched, opt, step: 0, ema_loss: f64::NAN })
    }
}

/// Assemble the batch for one step: either `batch_size` single frames (an
/// image batch) or `batch_size` clip heads of the stage's frame count.
/// Deterministic in (seed, step).
pub fn make_batch(
    clips: &[Tensor],
    cfg: &TrainConfig,
    stage: &StageConfig,
    step: usize,
) -> Result<Tensor> {
    if clips.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let mut rng = stream(cfg.seed, step as u64, Purpose::DataOrder);
    let image = rng.random_bool(cfg.image_batch_prob);
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let clip = &clips[rng.random_range(0..clips.len())];
        let t = clip.dim(0)?;
        if image {
            let f = rng.random_range(0..t);
            items.push(clip.narrow(0, f, 1)?);
        } else {
            if stage.frames > t {
                return Err(Error::data(format!(
                    "stage wants {} frames but clips have {t}",
                    stage.frames
                )));
            }
            items.push(clip.narrow(0, 0, stage.frames)?);
        }
    }
    let refs: Vec<&Tensor> = items.iter().collect();
    Ok(Tensor::stack(&refs, 0)?)
}

/// One optimization step on an assembled batch. Aborts with the offending
/// term named if any loss component is non-finite.
pub fn train_step(
    state: &mut TrainState,
    v0: &Tensor,
    eta: f64,
    perceptual: Option<&PerceptualNet>,
    lr: f64,
    seed: u64,
    grad_clip: f64,
) -> Result<LossBreakdown> {
    let step = state.step as u64;
    let n = v0.dim(0)?;
    let t_count = state.sched.t_count();
    let mut trng = stream(seed, step, Purpose::TimestepDraw);
    let ts: Vec<usize> = (0..n).map(|_| trng.random_range(1..=t_count)).collect();
    let eps = randn(seed, step, Purpose::NoiseDraw, v0.dims(), v0.dtype(), v0.device())?;
    let zt = 1 + (v0.dim(1)? - 1) / 4;
    let zdims = [n, zt, v0.dim(2)? / 8, v0.dim(3)? / 8, state.codec.config.latent_dim];
    let latent_eps = randn(seed, step, Purpose::LatentSample, &zdims, v0.dtype(), v0.device())?;

    let lambda = state.codec.config.lambda_kl;
    let (total, bd) =
        total_loss(&state.codec, &state.sched, perceptual, v0, &ts, &eps, &latent_eps, lambda, eta)?;
    for (name, val) in
        [("diffusion", bd.diffusion), ("kl", bd.kl), ("lpips", bd.lpips), ("total", bd.total)]
    {
        if !val.is_finite() {
            return Err(Error::numeric(format!(
                "{name} loss is non-finite at step {}",
                state.step
            )));
        }
    }
    let grads = total.backward()?;
    let vars = state.codec.store().vars();
    state.opt.step(&vars, &grads, lr, grad_clip)?;
    state.step += 1;
    state.ema_loss = if state.ema_loss.is_nan() {
        bd.total
    } else {
        0.98 * state.ema_loss + 0.02 * bd.total
    };
    Ok(bd)
}

/// Run from the state's current step to the end of the stage schedule,
/// logging one record per log interval and invoking the checkpoint callback
/// at the configured cadence (and once at the end).
pub fn train_loop<W: Write>(
    state: &mut TrainState,
    cfg: &TrainConfig,
    clips: &[Tensor],
    perceptual: Option<&PerceptualNet>,
    log: &mut W,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if cfg.stages.iter().any(|s| s.eta_lpips > 0.0) && perceptual.is_none() {
        return Err(Error::data(
            "a stage enables the perceptual term but no perceptual weights are loaded",
        ));
    }
    let total_steps = cfg.total_steps();
    let mut last_stage = usize::MAX;
    while state.step < total_steps {
        let (stage_idx, stage, stage_start) = cfg.stage_at(state.step);
        if stage_idx != last_stage {
            writeln!(
                log,
                "stage={} start_step={stage_start} frames={} eta_lpips={}",
                stage_idx + 1,
                stage.frames,
                stage.eta_lpips
            )?;
            last_stage = stage_idx;
        }
        let batch = make_batch(clips, cfg, stage, state.step)?;
        let lr = lr_at(state.step, total_steps, cfg.lr, cfg.warmup_steps);
        let bd = train_step(state, &batch, stage.eta_lpips, perceptual, lr, cfg.seed, cfg.grad_clip)?;
        if state.step.is_multiple_of(cfg.log_every.max(1)) || state.step == total_steps {
            writeln!(
                log,
                "step={} stage={} lr={:.3e} total={:.6} diffusion={:.6} kl={:.6} lpips={:.6} ema={:.6}",
                state.step,
                stage_idx + 1,
                lr,
                bd.total,
                bd.diffusion,
                bd.kl,
                bd.lpips,
                state.ema_loss
            )?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            on_checkpoint(state)?;
        }
    }
    on_checkpoint(state)?;
    Ok(())
}
