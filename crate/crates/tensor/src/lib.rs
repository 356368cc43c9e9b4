//! Dense CPU tensors with reverse-mode automatic differentiation.
//!
//! Every op records a backward closure when any input requires a gradient;
//! [`Tensor::backward`] sweeps the graph once and returns leaf gradients.
//! Convolutions lower to im2col + `matrixmultiply` gemm. The element type is
//! generic so the same kernels serve `f32` training and `f64` gradient checks.

mod ops;
mod param;
mod scalar;
mod tensor;

pub mod gradcheck;
pub mod nn;
pub mod optim;

pub use param::{Init, InitKind, Param, ParamSet};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tensor};
