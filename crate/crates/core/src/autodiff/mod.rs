//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
pub mod special;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
