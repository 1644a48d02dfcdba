use std::path::PathBuf;

use thiserror::Error;

use crate::policy::Policy;

#[derive(Debug, Error)]
pub enum RpoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("enumeration needs {required} sequences, over the budget of {budget}")]
    BudgetExceeded { required: u128, budget: u64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Training hit a non-finite loss. Carries the last parameters that
    /// produced a finite loss so the caller can inspect them.
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<Policy>,
    },

    #[error("critique failed: {0}")]
    Critique(String),
}

impl RpoError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        RpoError::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RpoError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, RpoError>;
