//! The clip type being compressed and reconstructed: (1+F, H, W, 3) RGB in
//! [-1, 1], F divisible by 4 and H, W by 8 so the 4x8x8 compression applies.

use candle_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct VideoTensor {
    frames: Tensor,
    pub fps: Option<f64>,
}

impl VideoTensor {
    /// Validates rank/divisibility. Value range is checked at data ingestion,
    /// not here: noised versions of a clip legitimately leave [-1, 1].
    pub fn new(frames: Tensor, fps: Option<f64>) -> Result<Self> {
        let dims = frames.dims();
        if dims.len() != 4 || dims[3] != 3 {
            return Err(Error::data(format!(
                "video tensor must be (1+F, H, W, 3), got {dims:?}"
            )));
        }
        let (t, h, w) = (dims[0], dims[1], dims[2]);
        if t == 0 || (t - 1) % 4 != 0 {
            return Err(Error::data(format!("frame count {t} is not 1+F with F % 4 == 0")));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::data(format!("resolution {h}x{w} not divisible by 8")));
        }
        Ok(Self { frames, fps })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    /// (1, 1+F, H, W, 3) view for the batched network entry points.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.frames.unsqueeze(0)?)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.dims()[0]
    }

    /// F, the motion frame count (0 for a single image).
    pub fn f(&self) -> usize {
        self.frame_count() - 1
    }

    pub fn height(&self) -> usize {
        self.frames.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.dims()[2]
    }

    /// Ingestion-time check that values are finite and inside [-1, 1].
    pub fn check_range(&self) -> Result<()> {
        let v = self.frames.flatten_all()?.to_vec1::<f32>()?;
        for (i, x) in v.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::data(format!("non-finite pixel at flat index {i}")));
            }
            if *x < -1.0 - 1e-6 || *x > 1.0 + 1e-6 {
                return Err(Error::data(format!("pixel {x} at flat index {i} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn accepts_valid_shapes() {
        let dev = Device::Cpu;
        for (t, h, w) in [(1usize, 8usize, 8usize), (5, 16, 8), (17, 64, 64)] {
            let x = Tensor::zeros((t, h, w, 3), DType::F32, &dev).unwrap();
            let v = VideoTensor::new(x, None).unwrap();
            assert_eq!(v.f(), t - 1);
        }
    }

    #[test]
    fn rejects_invalid_shapes() {
        let dev = Device::Cpu;
        for dims in [
            vec![2usize, 8, 8, 3],  // F = 1
            vec![5, 12, 8, 3],      // H % 8
            vec![5, 8, 8, 4],       // channels
            vec![5, 8, 8],          // rank
        ] {
            let x = Tensor::zeros(dims, DType::F32, &dev).unwrap();
            assert!(VideoTensor::new(x, None).is_err());
        }
    }

    #[test]
    fn range_check() {
        let dev = Device::Cpu;
        let ok = VideoTensor::new(Tensor::zeros((1, 8, 8, 3), DType::F32, &dev).unwrap(), None).unwrap();
        ok.check_range().unwrap();
        let bad = VideoTensor::new(
            Tensor::full(2.0f32, (1, 8, 8, 3), &dev).unwrap(),
            None,
        )
        .unwrap();
        assert!(bad.check_range().is_err());
    }
}
