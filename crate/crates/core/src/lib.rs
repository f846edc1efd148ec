//! Avatar-background conditioned video restoration with a small diffusion
//! transformer.
//!
//! The crate covers the whole pipeline at desk scale: procedural scenes with
//! exact ground truth, condition compositing, latent mask packing, a causal
//! latent codec, 3D-conv condition towers, a LoRA-adapted DiT over a frozen
//! randomly initialized base, rectified-flow training, Euler sampling and
//! PSNR/SSIM evaluation.

pub mod compositor;
pub mod condtowers;
pub mod dataset;
pub mod dit;
pub mod error;
pub mod latentcodec;
pub mod maskembed;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod synthdata;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};

/// Pixel-space clip, `channels x frames x height x width`.
pub type Video = ndarray::Array4<f32>;
