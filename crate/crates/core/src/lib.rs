//! Differentially private federated learning with adaptive local iterations.
//!
//! Clients train with DPSGD (Poisson subsampling, per-sample clipping,
//! Gaussian noise), the server averages their models by data share, a
//! Rényi-DP accountant tracks the privacy spent, and a scheduler picks the
//! number of local iterations per round from a convergence bound.

pub mod accountant;
pub mod cli;
pub mod data;
pub mod dpsgd;
pub mod error;
pub mod federation;
pub mod model;
pub mod rng;
pub mod scheduler;

pub use error::{Error, Result};
