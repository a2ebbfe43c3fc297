//! Perceptual distance from a small fixed random-feature network: three
//! strided 3x3 conv stages with ReLU, channel-unit-normalized activations,
//! squared feature differences averaged over positions and stages.
//!
//! The weights are frozen constants shipped with the crate, never trained;
//! training against the metric only ever differentiates through the inputs.
//! Each frame is scored independently, so clips and single images share one
//! definition.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::data::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::rng::{normal_f64, stream, Purpose};

/// Stage widths after the 3-channel input.
pub const STAGE_CHANNELS: [usize; 3] = [8, 16, 32];
/// Seed the shipped weight files were generated from.
pub const WEIGHTS_SEED: u64 = 0x7065_7263;
const NORM_EPS: f64 = 1e-10;

pub struct PerceptualNet {
    /// Per stage: weight (9*cin, cout) and bias (cout).
    stages: Vec<(Tensor, Tensor)>,
}

fn stage_dims() -> Vec<(usize, usize)> {
    let mut dims = Vec::new();
    let mut cin = 3;
    for &cout in &STAGE_CHANNELS {
        dims.push((cin, cout));
        cin = cout;
    }
    dims
}

/// 3x3 stride-2 conv over (M, H, W, C) with symmetric zero padding of 1,
/// via flat gather + one matmul. H and W must be even.
fn conv2d_s2(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, h, wd, c) = x.dims4()?;
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::data(format!("perceptual conv needs even dims, got {h}x{wd}")));
    }
    let dev = x.device();
    let dt = x.dtype();
    let zh = Tensor::zeros((m, 1, wd, c), dt, dev)?;
    let x = Tensor::cat(&[&zh, x, &zh], 1)?;
    let zw = Tensor::zeros((m, h + 2, 1, c), dt, dev)?;
    let x = Tensor::cat(&[&zw, &x, &zw], 2)?;
    let (hp, wp) = (h + 2, wd + 2);
    let (ho, wo) = (h / 2, wd / 2);
    let mut ids = Vec::with_capacity(m * ho * wo * 9);
    for mi in 0..m {
        for y in 0..ho {
            for xo in 0..wo {
                for dy in 0..3 {
                    for dx in 0..3 {
                        ids.push(((mi * hp + 2 * y + dy) * wp + 2 * xo + dx) as u32);
                    }
                }
            }
        }
    }
    let ids = Tensor::new(ids.as_slice(), dev)?;
    let cout = b.dim(0)?;
    let patches = x.reshape(((), c))?.index_select(&ids, 0)?.reshape(((), 9 * c))?;
    let y = patches.matmul(&w.to_dtype(dt)?)?.broadcast_add(&b.to_dtype(dt)?)?;
    Ok(y.reshape((m, ho, wo, cout))?)
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let sq = f.sqr()?.sum_keepdim(3)?;
    Ok(f.broadcast_div(&sq.affine(1.0, NORM_EPS)?.sqrt()?)?)
}

impl PerceptualNet {
    /// Deterministic weights drawn from the seeded stream; biases are zero.
    pub fn generate(seed: u64, device: &Device) -> Result<Self> {
        let mut stages = Vec::new();
        for (i, (cin, cout)) in stage_dims().into_iter().enumerate() {
            let mut rng = stream(seed, i as u64, Purpose::PerceptualInit);
            let std = 1.0 / ((9 * cin) as f64).sqrt();
            let vals: Vec<f64> = normal_f64(&mut rng, 9 * cin * cout).iter().map(|v| v * std).collect();
            let w = Tensor::from_vec(vals, (9 * cin, cout), device)?.to_dtype(DType::F32)?;
            let b = Tensor::zeros(cout, DType::F32, device)?;
            stages.push((w, b));
        }
        Ok(Self { stages })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (i, (w, b)) in self.stages.iter().enumerate() {
            write_tensor(dir.join(format!("stage{i}_w.cdt")), w)?;
            write_tensor(dir.join(format!("stage{i}_b.cdt")), b)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let dir = dir.as_ref();
        let mut stages = Vec::new();
        for (i, (cin, cout)) in stage_dims().into_iter().enumerate() {
            let w = read_tensor(dir.join(format!("stage{i}_w.cdt")), device)?;
            let b = read_tensor(dir.join(format!("stage{i}_b.cdt")), device)?;
            if w.dims() != [9 * cin, cout] || b.dims() != [cout] {
                return Err(Error::data(format!(
                    "perceptual stage {i}: unexpected shapes {:?} / {:?}",
                    w.dims(),
                    b.dims()
                )));
            }
            stages.push((w, b));
        }
        Ok(Self { stages })
    }

    pub fn bundled_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("weights").join("perceptual")
    }

    /// The weight files shipped in the crate source tree.
    pub fn bundled(device: &Device) -> Result<Self> {
        Self::load(Self::bundled_dir(), device)
    }

    /// Normalized feature maps per stage for (N, T, H, W, 3) video.
    fn features(&self, v: &Tensor) -> Result<Vec<Tensor>> {
        let (n, t, h, w, c) = v.dims5()?;
        if c != 3 {
            return Err(Error::data(format!("perceptual input needs 3 channels, got {c}")));
        }
        let mut x = v.reshape((n * t, h, w, c))?;
        let mut out = Vec::new();
        for (w, b) in &self.stages {
            x = conv2d_s2(&x, w, b)?.relu()?;
            out.push(unit_normalize(&x)?);
        }
        Ok(out)
    }

    /// Scalar distance between two clips of identical shape; zero iff the
    /// normalized features agree everywhere. Differentiable in both inputs.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::data(format!(
                "perceptual distance shape mismatch: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut acc: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(fb.iter()) {
            // sum over channels, mean over frames and positions
            let d = (x - y)?.sqr()?.sum_keepdim(3)?.mean_all()?;
            acc = Some(match acc {
                Some(a) => (a + d)?,
                None => d,
            });
        }
        Ok(acc.unwrap().affine(1.0 / self.stages.len() as f64, 0.0)?)
    }
}
