use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GmcrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GmcrError {
    /// Bad shapes, out-of-range parameters, unknown labels.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {what}")]
    Numeric { what: String },

    /// R² with a constant reference matrix.
    #[error("R² undefined: reference matrix is constant")]
    UndefinedR2,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GmcrError {
    pub fn argument(msg: impl Into<String>) -> Self {
        GmcrError::Argument(msg.into())
    }

    pub fn numeric(what: impl Into<String>) -> Self {
        GmcrError::Numeric { what: what.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GmcrError::Io {
            path: path.into(),
            source,
        }
    }
}
