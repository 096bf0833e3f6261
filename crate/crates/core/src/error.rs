//! Error type shared by the whole toolkit.

use thiserror::Error;

/// Errors produced by mesh handling, assembly, solvers and file I/O.
#[derive(Debug, Error)]
pub enum EitError {
    /// Invalid mesh topology or geometry.
    #[error("mesh error: {0}")]
    Mesh(String),

    /// A parameter violates its documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Sparse or dense factorization / linear solve failure.
    #[error("linear solve failed: {0}")]
    Solve(String),

    /// Malformed input file.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// Inconsistent data passed between pipeline stages.
    #[error("data mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EitError {
    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        EitError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, EitError>;
