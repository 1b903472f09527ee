//! Crate-wide error type with process exit-code mapping.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, invalid hyperparameters, malformed config files.
    #[error("configuration error: {0}")]
    Config(String),

    /// A function was called with an unusable argument value.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Tabular input could not be parsed. Row and column are 1-based.
    #[error("parse error in {path} (row {row}, column {col}): {msg}")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        msg: String,
    },

    /// A NaN or infinity appeared during numerical evaluation.
    #[error("non-finite value: {context}")]
    NonFinite {
        context: String,
        /// ODE/tape step index where the value appeared, when known.
        step: Option<usize>,
        /// Batch sample index, when known.
        sample: Option<usize>,
    },

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at iteration {iteration}: {msg}")]
    Diverged { iteration: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            step: None,
            sample: None,
        }
    }

    pub fn non_finite_at(context: impl Into<String>, step: usize) -> Self {
        Error::NonFinite {
            context: context.into(),
            step: Some(step),
            sample: None,
        }
    }

    /// Exit code contract: 0 success, 1 user error, 2 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
