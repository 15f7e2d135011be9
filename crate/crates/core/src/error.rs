//! Error type shared across the pipeline stages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent parameter set.
    #[error("configuration error: {0}")]
    Config(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An estimator could not produce a usable result (caller may skip
    /// the round/window and continue).
    #[error("estimation failure: {0}")]
    Estimation(String),

    /// Clock/slot alignment could not be established.
    #[error("synchronization failure: {0}")]
    Synchronization(String),

    /// Stages invoked out of order or on incompatible data.
    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// Input degenerate for the requested operation (e.g. no 0/1 balance
    /// for pairing).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Statistics requested over an empty record set.
    #[error("undefined statistics: {0}")]
    UndefinedStatistics(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
