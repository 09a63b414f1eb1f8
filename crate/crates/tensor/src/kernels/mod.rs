//! Raw slice kernels behind the tape operations.

pub mod activation;
pub mod broadcast;
pub mod conv;
pub mod matmul;
pub mod norm;
pub mod pool;
pub mod resample;
