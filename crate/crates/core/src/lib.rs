//! Continual test-time adaptation with a mixture of activation-sparsity
//! experts and EMA-anchored on-policy distillation.

pub mod daopd;
pub mod diagnostics;
pub mod error;
pub mod gating;
pub mod harness;
pub mod model;
pub mod policy;
pub mod sdd;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{AffineMap, Polarity, Rng, Tensor};
