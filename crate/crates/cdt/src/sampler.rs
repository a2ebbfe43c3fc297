//! Deterministic accelerated sampling: a rounded uniform timestep grid, the
//! variance-free update driven by clean-video predictions, and the
//! encode/decode round trip built from both.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::VideoCodec;
use crate::rng::{randn, Purpose};
use crate::schedule::{eps_from_x0, NoiseSchedule};

/// Strictly increasing timesteps tau_0 = 0 < tau_1 < ... < tau_N = T.
/// Sampling walks the grid from T down to 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeGrid {
    taus: Vec<usize>,
}

impl TimeGrid {
    /// tau_i = round(i * T / N). Strict monotonicity holds for every
    /// n_steps <= T, which the constructor enforces.
    pub fn uniform(t_count: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::usage("sampler needs at least 1 step"));
        }
        if n_steps > t_count {
            return Err(Error::usage(format!(
                "{n_steps} sampling steps exceed the {t_count}-step schedule"
            )));
        }
        let taus: Vec<usize> = (0..=n_steps)
            .map(|i| ((i * t_count) as f64 / n_steps as f64).round() as usize)
            .collect();
        for w in taus.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::numeric(format!("time grid not strictly increasing: {taus:?}")));
            }
        }
        Ok(Self { taus })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn steps(&self) -> usize {
        self.taus.len() - 1
    }

    /// (tau_i, tau_{i-1}) pairs from the noisiest step down to zero.
    pub fn pairs_desc(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..self.taus.len()).rev().map(|i| (self.taus[i], self.taus[i - 1]))
    }
}

/// One deterministic update from level t to t_prev given the predicted clean
/// video: reproject the implied noise at the lower level. t_prev = 0 returns
/// the prediction itself, exactly, with no arithmetic applied.
pub fn ddim_step(
    v_t: &Tensor,
    v0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::usage(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
    }
    if t_prev == 0 {
        return Ok(v0_hat.clone());
    }
    let eps_hat = eps_from_x0(v_t, v0_hat, t, sched)?;
    let ab = sched.alpha_bar(t_prev);
    Ok((v0_hat.affine(ab.sqrt(), 0.0)? + eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Decode a latent grid (N, 1+f, h, w, c) to video (N, 1+4f, 8h, 8w, 3):
/// start from seeded standard normal noise at level T and run n_steps
/// deterministic updates. Condition maps are computed once and reused, so the
/// denoiser runs exactly n_steps times.
pub fn decode_latent(
    codec: &VideoCodec,
    sched: &NoiseSchedule,
    z: &Tensor,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let (n, zt, zh, zw, zc) = z.dims5()?;
    if zc != codec.config.latent_dim {
        return Err(Error::data(format!(
            "latent has {zc} channels, model expects {}",
            codec.config.latent_dim
        )));
    }
    if sched.t_count() != codec.config.t_count {
        return Err(Error::usage("schedule length does not match model config"));
    }
    let (t, h, w) = (1 + 4 * (zt - 1), 8 * zh, 8 * zw);
    let grid = TimeGrid::uniform(sched.t_count(), n_steps)?;
    let mut v = randn(seed, 0, Purpose::PriorInit, &[n, t, h, w, 3], z.dtype(), z.device())?;
    // Sampling is never differentiated through; detaching between steps keeps
    // the live graph to a single denoiser pass instead of all n_steps of them.
    let maps: Vec<Tensor> = codec.condition_maps(z)?.iter().map(|m| m.detach()).collect();
    for (t_cur, t_prev) in grid.pairs_desc() {
        let x0 = codec.denoise_with_maps(&v, &maps, &vec![t_cur; n])?;
        v = ddim_step(&v, &x0, t_cur, t_prev, sched)?.detach();
    }
    Ok(v)
}

/// Encode to the posterior, take its mean, decode. The latent is the
/// deterministic posterior mean, so the only sampling randomness is the
/// seeded prior noise.
pub fn reconstruct(
    codec: &VideoCodec,
    sched: &NoiseSchedule,
    v: &Tensor,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let post = codec.encode(v)?;
    decode_latent(codec, sched, &post.mode(), n_steps, seed)
}
