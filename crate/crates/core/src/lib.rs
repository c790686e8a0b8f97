//! Temporal cycle-consistency learning over per-frame feature sequences.
//!
//! The crate trains a per-frame embedder so that sequences of the same action
//! can be aligned by nearest-neighbor matching, and provides the evaluation
//! measures and alignment tools that go with it.

pub mod align;
pub mod baselines;
pub mod data;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod probe;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Result, TccError};
pub use tensor::Tensor;
