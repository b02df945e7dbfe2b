//! Quantization-aware training with quantized feature distillation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: deterministic reverse-mode autodiff over dense tensors.
//! - [`quantizer`]: the learnable uniform fake-quantizer and its straight-through backward.
//! - [`models`]: MLP, residual CNN and small vision transformer with per-layer quantization policies.
//! - [`distill`]: baseline, feature, logit and quantized-feature distillation objectives.
//! - [`train`]: SGD, schedules, training/evaluation loops, checkpoints and comparison suites.
//! - [`data`]: synthetic tasks plus IDX and CIFAR binary loaders.

pub mod data;
pub mod distill;
pub mod error;
pub mod models;
pub mod quantizer;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
