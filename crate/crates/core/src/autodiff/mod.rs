//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
