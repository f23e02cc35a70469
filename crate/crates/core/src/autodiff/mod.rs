//! Dense `f64` tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
