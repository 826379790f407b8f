use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate slice: every position along axis {axis} is masked")]
    DegenerateSlice { axis: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary error: id {id} out of range for table with {size} rows")]
    Vocabulary { id: usize, size: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (gradient norm {grad_norm})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
        grad_norm: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
