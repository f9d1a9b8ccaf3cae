use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file did not follow the expected on-disk layout.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Two inputs that must agree did not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Configuration problems. All problems found are collected.
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// A non-finite value showed up where a finite one was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called on an object in the wrong state.
    #[error("state error: {0}")]
    State(String),

    /// A caller broke an interface contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Format { .. } => "format",
            Error::Consistency(_) => "consistency",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::State(_) => "state",
            Error::Contract(_) => "contract",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
