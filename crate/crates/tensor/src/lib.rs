//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is `f64`. Graphs are built eagerly as operations run and are
//! single-threaded; the plain-data [`ParameterSet`] is what crosses thread
//! boundaries.

mod conv;
mod error;
pub mod gradcheck;
mod ops;
pub mod optim;
mod param;
pub mod special;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use param::{BoundParams, Param, ParameterSet};
pub use tensor::{BackwardReport, Tensor};
