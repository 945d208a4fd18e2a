//! Semantic guidance for diffusion sampling.
//!
//! [`guidance`] holds the guidance calculus, [`diffusion`] an analytic
//! Gaussian-mixture diffusion model whose noise estimates are exact, and
//! [`diagnostics`] distribution and mask summaries. [`config`] is the JSON
//! document shared by the command-line harness and the steering service.

pub mod config;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Latent, Rng};
