//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
pub mod kernels;
mod optim;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{BatchNormAttrs, BatchNormMode, Conv2dAttrs, Graph, NodeId, OpKind, Pool2dAttrs};
pub use kernels::softmax_rows;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tensor::Tensor;
