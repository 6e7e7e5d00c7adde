//! Minimal dense-tensor substrate for small convolutional models.
//!
//! Values are `f64`, stored row-major (NCHW for images). Differentiation is
//! reverse mode over a [`Tape`] that records every operation as it is
//! evaluated; [`Tape::backward`] walks the records in reverse and returns
//! gradients for parameters and for input leaves alike. Input gradients are
//! what the sampling-time guidance consumes.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kv;
pub mod layers;
mod linalg;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{timestep_embedding, Tensor};
