//! Topology generation by guided denoising diffusion: finite elements, SIMP
//! baselines, problem sampling, the diffusion model, surrogate guidance,
//! evaluation metrics and dataset files.

pub mod dataset;
pub mod diffusion;
mod error;
pub mod fea;
pub mod guidance;
pub mod metrics;
pub mod problem;
pub mod simp;
pub mod surrogates;

pub use error::{CoreError, Result};
