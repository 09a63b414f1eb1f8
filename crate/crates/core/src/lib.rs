//! Dual-branch CNN/transformer networks coupled by feature coupling units.

pub mod audit;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod fcu;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod trainer;
pub mod viz;

pub use config::{ConformerConfig, Injection, Sampling, Structure};
pub use error::{Error, Result};
pub use model::{predict, Conformer, ForwardOptions, ForwardPass, Logits, Taps};
pub use params::{Buffers, ModelParams};
pub use trainer::{dual_loss, TrainConfig, Trainer};
