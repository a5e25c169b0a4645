//! MPSI: Mamba-powered super-resolution in pure Rust.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod param;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Double-precision tensor (the default for training and verification).
pub type TensorF64 = Tensor<f64>;
/// Single-precision tensor.
pub type TensorF32 = Tensor<f32>;
/// Double-precision model.
pub type MpsiF64 = model::Mpsi<f64>;
/// Single-precision model.
pub type MpsiF32 = model::Mpsi<f32>;
