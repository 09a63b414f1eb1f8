//! Dense tensors, numerical kernels, reverse-mode autodiff and a
//! finite-difference gradient checker.

mod element;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
mod tape;
mod tensor;

pub use element::{gemm, DType, Element, MatRef};
pub use error::{Result, TensorError};
pub use kernels::pool::PoolKind;
pub use tape::{BatchNormMode, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
