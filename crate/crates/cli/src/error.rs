use std::path::PathBuf;

use fgrm_core::CoreError;
use thiserror::Error;

pub type Result<T, E = RunError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] CoreError),
    /// Unparseable config; serde's message names the offending field.
    #[error("config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("dataset manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid sweep: {0}")]
    Sweep(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl RunError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::ConfigParse { .. } | RunError::Sweep(_) => 2,
            RunError::Manifest { .. } | RunError::Io { .. } | RunError::Image { .. } => 4,
            RunError::Core(e) => match e {
                CoreError::Config { .. }
                | CoreError::Architecture(_)
                | CoreError::UnknownCorruption(_)
                | CoreError::InputShape { .. }
                | CoreError::LabelOutOfRange { .. }
                | CoreError::NotOneHot { .. } => 2,
                CoreError::Tensor(_)
                | CoreError::Metric { .. }
                | CoreError::Diverged { .. }
                | CoreError::NonFiniteGradient { .. }
                | CoreError::NonFiniteUpdate { .. } => 3,
                CoreError::Io { .. } | CoreError::Checkpoint { .. } => 4,
            },
        }
    }
}
