//! Closed-form diffusion math: the cosine noise schedule, forward noising,
//! SNR weighting, and the x0 <-> eps conversion.
//!
//! Timestep convention: public timesteps live in `[0, T]` with `t = 0` the
//! clean data and `t = T` the prior. Internally the tables are 0-based over
//! `[0, T-1]`, index `t-1` holding the values for public step `t`; `abar(0)`
//! is defined as exactly 1.

use candle_core::Tensor;

use crate::error::{Error, Result};

pub const COSINE_S: f64 = 0.008;
pub const BETA_MAX: f64 = 0.999;

/// Precomputed beta/alpha/alpha-bar tables over T timesteps, f64 throughout.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_count: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn cosine_profile(u: f64) -> f64 {
    let a = (u + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2;
    a.cos().powi(2)
}

/// Squared-cosine alpha-bar profile, normalized so f(0) = 1.
pub fn cosine_alpha_bar(u: f64) -> f64 {
    cosine_profile(u) / cosine_profile(0.0)
}

/// Cosine schedule: betas derived from the squared-cosine alpha-bar profile
/// with offset s = 0.008, clipped to <= 0.999, then alpha-bars rebuilt as the
/// cumulative product so the tables stay self-consistent after clipping.
pub fn cosine_schedule(t_count: usize) -> Result<NoiseSchedule> {
    if t_count < 1 {
        return Err(Error::usage("noise schedule needs T >= 1"));
    }
    let mut betas = Vec::with_capacity(t_count);
    let mut prev = cosine_alpha_bar(0.0);
    for t in 1..=t_count {
        let cur = cosine_alpha_bar(t as f64 / t_count as f64);
        betas.push((1.0 - cur / prev).min(BETA_MAX));
        prev = cur;
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_count);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { t_count, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn t_count(&self) -> usize {
        self.t_count
    }

    /// Valid for public t in [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_count, "timestep {t} out of [1, {}]", self.t_count);
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_count, "timestep {t} out of [1, {}]", self.t_count);
        self.alphas[t - 1]
    }

    /// Valid for public t in [0, T]; abar(0) == 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_count, "timestep {t} out of [0, {}]", self.t_count);
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_count {
            return Err(Error::usage(format!(
                "timestep {t} out of [1, {}]",
                self.t_count
            )));
        }
        Ok(())
    }
}

/// Forward noising: V_t = sqrt(abar_t) V_0 + sqrt(1 - abar_t) eps.
pub fn q_sample(v0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if v0.dims() != eps.dims() {
        return Err(Error::data(format!(
            "q_sample shape mismatch: {:?} vs {:?}",
            v0.dims(),
            eps.dims()
        )));
    }
    let ab = sched.alpha_bar(t);
    Ok((v0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Loss weight converting x0-space MSE into eps-space MSE: abar/(1 - abar).
pub fn snr_weight(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::numeric("snr weight undefined at alpha_bar = 1"));
    }
    Ok(snr_of(ab))
}

pub(crate) fn snr_of(alpha_bar: f64) -> f64 {
    alpha_bar / (1.0 - alpha_bar)
}

/// Implied noise of an x0 prediction: eps = (V_t - sqrt(abar) x0) / sqrt(1 - abar).
pub fn eps_from_x0(v_t: &Tensor, v0_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if v_t.dims() != v0_hat.dims() {
        return Err(Error::data(format!(
            "eps_from_x0 shape mismatch: {:?} vs {:?}",
            v_t.dims(),
            v0_hat.dims()
        )));
    }
    let ab = sched.alpha_bar(t);
    let num = (v_t - v0_hat.affine(ab.sqrt(), 0.0)?)?;
    Ok(num.affine(1.0 / (1.0 - ab).sqrt(), 0.0)?)
}
