//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod linalg;
mod tape;
mod tensor;

pub use tape::{AttentionDims, RopeDims, Tape, Var};
pub use tensor::Tensor;
