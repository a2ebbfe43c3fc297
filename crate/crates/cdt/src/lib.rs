//! Causal diffusion video tokenizer.
//!
//! A video clip of 1+F frames is compressed 4x in time and 8x8 in space by a
//! causal 3D-convolutional encoder into a 16-dim Gaussian latent grid, and
//! reconstructed by a conditional diffusion decoder: a 3D U-Net that directly
//! predicts the clean video, conditioned on the latent through a Condition
//! Adapter, sampled with deterministic DDIM (down to a single step).
//!
//! Everything temporal is causal (past-only padding), which enables chunked
//! streaming inference with small per-layer feature caches that is equivalent
//! to whole-clip processing. See the examples/ directory for runnable tours of
//! each capability.

pub mod ckpt;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod perceptual;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod stream;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use video::VideoTensor;

/// Version of the config/checkpoint/container formats.
pub const FORMAT_VERSION: u32 = 1;
