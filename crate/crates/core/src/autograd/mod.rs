//! A small reverse-mode automatic differentiation tape over dense tensors.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var, BN_EPS};
pub use tensor::Tensor;
