//! Quantization-aware training with stochastic quantized weight averaging.
//!
//! The crate covers the full workflow: full-precision pretraining, direct
//! uniform quantization, cyclical-lr retraining on full-precision shadow
//! weights with model capture at cycle minima, exact averaging of the
//! captured models on their shared step grid, re-quantization, and low-lr
//! fine-tuning. The `losscape` module evaluates loss surfaces on the plane
//! through three models, optionally quantizing every plane point.

pub mod averaging;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losscape;
pub mod nn;
pub mod pipeline;
pub mod qat;
pub mod quant;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
