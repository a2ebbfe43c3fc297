//! Reconstruction quality metrics and dataset-level latent statistics.
//!
//! Pixel metrics treat videos on the [0, 1] scale: inputs arrive in [-1, 1]
//! and are rescaled before any comparison, so PSNR and SSIM constants match
//! their usual image-processing definitions with peak value 1.

use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VideoCodec;
use crate::perceptual::PerceptualNet;
use crate::sampler::decode_latent;
use crate::schedule::NoiseSchedule;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::data(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB on the [0, 1] scale, capped at 100.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let av = to_f64(a)?;
    let bv = to_f64(b)?;
    let mut acc = 0f64;
    for (x, y) in av.iter().zip(bv.iter()) {
        // [-1,1] -> [0,1] halves the difference
        let d = (x - y) * 0.5;
        acc += d * d;
    }
    let mse = acc / av.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid convolution of an h*w plane with the Gaussian window.
fn blur(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let k = SSIM_WINDOW;
    let wo = w - k + 1;
    let mut rows = vec![0f64; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (j, wj) in win.iter().enumerate() {
                acc += wj * plane[y * w + x + j];
            }
            rows[y * wo + x] = acc;
        }
    }
    let ho = h - k + 1;
    let mut out = vec![0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (j, wj) in win.iter().enumerate() {
                acc += wj * rows[(y + j) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged
/// over frames and channels. Inputs are rank-4 (t, h, w, c) in [-1, 1].
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let (t, h, w, c) = a.dims4().map_err(|_| Error::data("ssim wants (frames, h, w, c)"))?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::data(format!(
            "frame {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let av = to_f64(a)?;
    let bv = to_f64(b)?;
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut planes = 0usize;
    let mut pa = vec![0f64; h * w];
    let mut pb = vec![0f64; h * w];
    for fi in 0..t {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let idx = ((fi * h + y) * w + x) * c + ci;
                    pa[y * w + x] = (av[idx] + 1.0) * 0.5;
                    pb[y * w + x] = (bv[idx] + 1.0) * 0.5;
                }
            }
            let mu_a = blur(&pa, h, w);
            let mu_b = blur(&pb, h, w);
            let aa = blur(&pa.iter().map(|v| v * v).collect::<Vec<_>>(), h, w);
            let bb = blur(&pb.iter().map(|v| v * v).collect::<Vec<_>>(), h, w);
            let ab = blur(&pa.iter().zip(&pb).map(|(x, y)| x * y).collect::<Vec<_>>(), h, w);
            let mut acc = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = aa[i] - ma * ma;
                let vb = bb[i] - mb * mb;
                let cov = ab[i] - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            total += acc / mu_a.len() as f64;
            planes += 1;
        }
    }
    Ok(total / planes as f64)
}

/// Perceptual distance between two clips, lower is better.
pub fn lpips_metric(net: &PerceptualNet, a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let d = net.distance(&a.unsqueeze(0)?, &b.unsqueeze(0)?)?;
    Ok(d.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

// ---------------------------------------------------------------------------
// latent statistics

/// Single-pass per-channel mean and variance over latent positions.
pub struct LatentAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl LatentAccumulator {
    pub fn new(channels: usize) -> Self {
        Self { count: 0, mean: vec![0.0; channels], m2: vec![0.0; channels] }
    }

    /// Feed one latent tensor (.., c); every leading position is a sample.
    pub fn push(&mut self, latent: &Tensor) -> Result<()> {
        let c = self.mean.len();
        let dims = latent.dims();
        if dims.last() != Some(&c) {
            return Err(Error::data(format!(
                "latent has {} channels, accumulator expects {c}",
                dims.last().copied().unwrap_or(0)
            )));
        }
        let vals = to_f64(latent)?;
        for pos in vals.chunks_exact(c) {
            self.count += 1;
            for (ci, &v) in pos.iter().enumerate() {
                let d = v - self.mean[ci];
                self.mean[ci] += d / self.count as f64;
                self.m2[ci] += d * (v - self.mean[ci]);
            }
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Population mean and variance per channel.
    pub fn finish(self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.count == 0 {
            return Err(Error::data("latent statistics over an empty dataset"));
        }
        let n = self.count as f64;
        let var = self.m2.iter().map(|m| m / n).collect();
        Ok((self.mean, var))
    }
}

/// Per-channel statistics of posterior means over a set of clips, streamed
/// so memory stays flat in the dataset size.
pub fn latent_stats(codec: &VideoCodec, clips: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut acc = LatentAccumulator::new(codec.config.latent_dim);
    for clip in clips {
        let post = codec.encode(&clip.unsqueeze(0)?)?;
        acc.push(&post.mean)?;
    }
    acc.finish()
}

/// Mean frame of a clip set, a trivial reconstruction baseline.
pub fn mean_frame(clips: &[Tensor]) -> Result<Tensor> {
    if clips.is_empty() {
        return Err(Error::data("mean frame of an empty dataset"));
    }
    let mut acc: Option<Tensor> = None;
    let mut frames = 0usize;
    for clip in clips {
        let sum = clip.to_dtype(candle_core::DType::F64)?.sum(0)?;
        frames += clip.dim(0)?;
        acc = Some(match acc {
            None => sum,
            Some(a) => (a + sum)?,
        });
    }
    let mean = acc.unwrap().affine(1.0 / frames as f64, 0.0)?;
    Ok(mean.to_dtype(clips[0].dtype())?)
}

/// PSNR of predicting the train-split mean frame for every frame of every
/// eval clip: the no-model floor a trained reconstruction has to clear.
pub fn baseline_psnr(train_clips: &[Tensor], eval_clips: &[(String, Tensor)]) -> Result<f64> {
    if eval_clips.is_empty() {
        return Err(Error::data("baseline psnr needs at least one eval clip"));
    }
    let mean = mean_frame(train_clips)?;
    let mut acc = 0.0;
    for (_, clip) in eval_clips {
        let pred = mean.unsqueeze(0)?.broadcast_as(clip.dims())?;
        acc += psnr(clip, &pred.contiguous()?)?;
    }
    Ok(acc / eval_clips.len() as f64)
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipReport {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_lpips: f64,
    /// Wall-clock seconds spent inside latent decoding.
    pub decode_seconds: f64,
    pub latent_mean: Vec<f64>,
    pub latent_var: Vec<f64>,
}

/// Reconstruct every clip and score it. Decoding is timed separately from
/// encoding; latent statistics come from the same encoder passes.
pub fn evaluate(
    codec: &VideoCodec,
    sched: &NoiseSchedule,
    net: &PerceptualNet,
    clips: &[(String, Tensor)],
    n_steps: usize,
    seed: u64,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::data("evaluation over an empty dataset"));
    }
    let mut acc = LatentAccumulator::new(codec.config.latent_dim);
    let mut reports = Vec::with_capacity(clips.len());
    let mut decode_seconds = 0.0;
    for (i, (name, clip)) in clips.iter().enumerate() {
        let batched = clip.unsqueeze(0)?;
        let post = codec.encode(&batched)?;
        acc.push(&post.mean)?;
        let z = post.mode();
        let t0 = Instant::now();
        let recon = decode_latent(codec, sched, &z, n_steps, seed ^ i as u64)?.squeeze(0)?;
        decode_seconds += t0.elapsed().as_secs_f64();
        reports.push(ClipReport {
            name: name.clone(),
            psnr: psnr(clip, &recon)?,
            ssim: ssim(clip, &recon)?,
            lpips: lpips_metric(net, clip, &recon)?,
        });
    }
    let n = reports.len() as f64;
    let (latent_mean, latent_var) = acc.finish()?;
    Ok(EvalReport {
        mean_psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_lpips: reports.iter().map(|r| r.lpips).sum::<f64>() / n,
        clips: reports,
        decode_seconds,
        latent_mean,
        latent_var,
    })
}
