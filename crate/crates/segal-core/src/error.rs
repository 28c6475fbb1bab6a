//! Error type shared by all core modules.

use alloc::string::String;

/// Errors produced by core operations.
///
/// The variants map one-to-one onto the process exit codes used by the
/// CLI: configuration (2), data (3) and numerical (4) failures.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoreError {
    /// Invalid configuration or parameters outside their documented domain.
    #[error("configuration error: {0}")]
    Config(String),
    /// Inconsistent or out-of-contract data passed between modules.
    #[error("logic error: {0}")]
    Logic(String),
    /// Non-finite values encountered during numerical work.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Failure reported by an observer sink (e.g. persistence).
    #[error("sink error: {0}")]
    Sink(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn logic(msg: impl Into<String>) -> Self {
        CoreError::Logic(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }
}
