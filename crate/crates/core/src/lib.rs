//! Test-time adaptation of frozen classifiers through a single learned
//! additive input tensor (a "meta input"), plus the tooling to pretrain the
//! classifiers, synthesize shifted and corrupted target data, and compare
//! against batch-norm statistic adaptation.

pub mod adaptation;
mod container;
pub mod harness;
pub mod data;
pub mod error;
pub mod model;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the element type used by the whole pipeline.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by oracles and numerical checks.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
