use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, out-of-range indices, schema violations.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path} at row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Artifacts that do not belong together (config hash or dimension mismatch).
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
