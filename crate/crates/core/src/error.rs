use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the segmentation pipeline.
#[derive(Debug, Error)]
pub enum SfsegError {
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: header declares {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate solution: {0}")]
    Degenerate(String),

    #[error("size limit exceeded: {0}")]
    Size(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Training {
        epoch: usize,
        loss: f64,
        history: Vec<f64>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SfsegError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SfsegError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            SfsegError::Numeric(_)
                | SfsegError::Degenerate(_)
                | SfsegError::Convergence { .. }
                | SfsegError::Training { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SfsegError>;
