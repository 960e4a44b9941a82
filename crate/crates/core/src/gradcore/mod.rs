//! Dense tensors and a define-by-run reverse-mode differentiation tape.

mod tape;
mod tensor;

pub use tape::{grad, Gradients, Tape, Var};
pub use tensor::Tensor;
