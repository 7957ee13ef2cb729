//! Evidential segmentation with calibration metrics and Fisher-weighted
//! policy-gradient tuning.
//!
//! The pipeline: generate synthetic [`scenes`], pretrain the evidential
//! [`model`] with [`train::pretrain`], tune it against a calibration reward
//! with [`tuner::tune`], and score it with [`metrics`] through [`eval`].

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod scenes;
pub mod train;
pub mod tuner;

pub use error::{CoreError, Result};
