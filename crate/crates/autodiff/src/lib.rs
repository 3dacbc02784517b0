//! Reverse-mode automatic differentiation on dynamically shaped ndarray
//! tensors.
//!
//! The design goal is higher-order differentiation: [`backward`] expresses
//! every vector-Jacobian product with the same tensor ops used in forward
//! passes, so the returned gradients are graph tensors that can be fed to
//! [`backward`] again. That is what makes gradient-penalty objectives (a
//! loss on the norm of a gradient) trainable without any special casing.
//!
//! The engine is generic over [`Scalar`] (`f32` or `f64`): models train in
//! `f32`, while tests can instantiate the exact same code in `f64` for
//! finite-difference comparisons.

mod scalar;
mod tensor;

pub mod gradcheck;
pub mod nn;
pub mod optim;

pub use scalar::Scalar;
pub use tensor::{backward, conv_out_size, Gradients, Tensor, WindowSpec};
