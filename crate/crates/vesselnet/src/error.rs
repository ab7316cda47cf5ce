//! Crate-wide error type with the exit-code categories used by the CLI.

use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by the library. The `Display` form is a single line of
/// the shape `category: message`, which the CLI prints verbatim.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, parameter combination, or model/checkpoint
    /// mismatch. CLI exit code 2.
    #[error("config: {0}")]
    Config(String),

    /// Bad input data: malformed manifests, wrong sample rates, shape
    /// mismatches. CLI exit code 3.
    #[error("data: {0}")]
    Data(String),

    /// Filesystem failure, annotated with the offending path. CLI exit code 3.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Numerical failure such as a NaN loss or non-finite attention scores.
    /// CLI exit code 4.
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code for the CLI (`0` is success and never produced here).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
