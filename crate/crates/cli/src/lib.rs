//! Seeded experiment harness: parameter sweeps over guided sampling runs,
//! ablation matrices and distribution diagnostics, written as CSV/JSON.

pub mod ablate;
pub mod diag;
mod error;
pub mod experiment;
pub mod output;

pub use error::{Error, Result};
