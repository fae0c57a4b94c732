use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum MoseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {file} line {line}: {message}")]
    Format {
        file: String,
        line: usize,
        message: String,
    },

    /// A computation would exceed its enumeration or size budget.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl MoseError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MoseError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        MoseError::Format {
            file: file.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, MoseError>;
