use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FedError> = std::result::Result<T, E>;

/// Errors surfaced by the simulator. Each variant maps onto a process exit
/// category so the CLI can report config, data and numeric failures apart.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("data error in {}: {message}", file.display())]
    Data { file: PathBuf, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl FedError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        FedError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn data(file: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        FedError::Data {
            file: file.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            FedError::Config { .. } => 2,
            FedError::Data { .. } => 3,
            FedError::Numeric(_) => 4,
            FedError::Io(_) | FedError::Json(_) | FedError::Csv(_) => 1,
        }
    }
}
