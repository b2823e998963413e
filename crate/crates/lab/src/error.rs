use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// Bad configuration or arguments.
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] iib_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed run file: {reason}")]
    RunFile { path: PathBuf, reason: String },
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Run(String),
    #[error("{failed} of {total} cells failed")]
    CellsFailed { failed: usize, total: usize },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
