//! Experiment runner: configs, dataset manifests, and the
//! pretrain / tune / eval / ablation commands.

pub mod config;
pub mod dataset;
pub mod error;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{Result, RunError};
pub use run::Experiment;
