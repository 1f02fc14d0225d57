//! Error taxonomy shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value (bad sizes, empty ranges, unknown keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// Failure to read or write an artifact on disk.
    #[error("persistence error at {path}: {reason}")]
    Persistence { path: PathBuf, reason: String },

    /// Internal shape/metadata mismatch between components.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Input without enough structure to operate on (constant image, empty
    /// foreground, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Non-finite values where finite ones are required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Evaluation cannot proceed (single-class dataset, empty group, ...).
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub fn persistence(path: impl Into<PathBuf>, reason: impl std::fmt::Display) -> Self {
        Error::Persistence {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 data/persistence, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Persistence { .. } | Error::Integrity(_) | Error::Degenerate(_) => 3,
            Error::Numerical(_) => 4,
            Error::Evaluation(_) => 3,
        }
    }
}
