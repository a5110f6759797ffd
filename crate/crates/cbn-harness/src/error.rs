//! Error type for the training harness.

use std::fmt;
use std::path::PathBuf;

use cbn_core::error::CoreError;

/// Everything that can go wrong while driving an experiment.
#[derive(Debug)]
pub enum HarnessError {
    /// Configuration file problems: parse errors, unknown keys, bad values.
    Config(String),
    /// Malformed data file, with the byte offset where parsing failed.
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    /// I/O failure, with the path involved.
    Io { path: PathBuf, message: String },
    /// Invalid argument to an operation.
    Argument(String),
    /// Error bubbled up from the numerical core.
    Core(CoreError),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(msg) => write!(f, "config error: {msg}"),
            HarnessError::Format {
                path,
                offset,
                message,
            } => write!(
                f,
                "format error in {} at byte {offset}: {message}",
                path.display()
            ),
            HarnessError::Io { path, message } => {
                write!(f, "io error on {}: {message}", path.display())
            }
            HarnessError::Argument(msg) => write!(f, "invalid argument: {msg}"),
            HarnessError::Core(err) => write!(f, "core error: {err}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<CoreError> for HarnessError {
    fn from(err: CoreError) -> HarnessError {
        HarnessError::Core(err)
    }
}

/// Attaches a path to a raw I/O error.
pub fn io_err(path: impl Into<PathBuf>, err: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.into(),
        message: err.to_string(),
    }
}

pub type HarnessResult<T> = Result<T, HarnessError>;
