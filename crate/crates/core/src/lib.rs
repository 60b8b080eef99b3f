//! Structured CNN filter pruning driven by the distribution of filter L1 norms.
//!
//! Each prunable conv layer's filter norms are fitted with a Gaussian and the
//! filters whose norm falls outside `(mean - alpha * std, mean + alpha * std)`
//! are removed. `alpha` is searched per layer, last layer first, under an
//! accuracy-recovery gate with retraining and rollback.

pub mod config;
mod csv;
pub mod data;
pub mod driver;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod optim;
pub mod prune;
pub mod report;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use tensor::{Scalar, Tensor};
