//! Sparse precision matrix estimation under the ℓ1-penalized D-trace loss.

pub mod baselines;
pub mod dtrace;
pub mod error;
pub mod evalkit;
pub mod linalg;
pub mod reduction;
pub mod sieving;
pub mod ssn_alm;
pub mod synth;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
