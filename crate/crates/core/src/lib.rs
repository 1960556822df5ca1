//! Mean-field Bayesian neural networks trained by variational free energy
//! minimization and pruned with Bayesian model reduction.

pub mod bmr;
pub mod data;
pub mod dists;
pub mod error;
pub mod grad;
pub mod harness;
pub mod net;
pub mod special;
pub mod tape;

pub use error::{Error, Result};
