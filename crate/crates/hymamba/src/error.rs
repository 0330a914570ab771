//! Error type shared across the crate.
//!
//! The CLI maps variants onto process exit codes: contract/config/shape
//! problems exit 1, numeric failures (NaN) exit 2, IO errors exit 3.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes, always naming both sides.
    #[error("{op}: dimension mismatch {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An object was used after it was consumed (e.g. a spent tape).
    #[error("state error: {0}")]
    State(String),
    /// Non-finite values where the contract requires finite ones.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Invalid configuration value or file.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 contract/config, 2 numeric, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            Error::Io { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
