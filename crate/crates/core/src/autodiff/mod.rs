//! Reverse-mode automatic differentiation over dense tensors.

pub mod check;
mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests;
