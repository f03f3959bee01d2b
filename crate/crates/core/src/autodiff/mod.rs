//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
