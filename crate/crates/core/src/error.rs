//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a structural or numeric precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Two vectors (or a vector and a matrix row) disagree on dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A noise stream was asked for more rounds than its horizon.
    #[error("noise stream exhausted: round {round} >= horizon {horizon}")]
    HorizonExhausted { round: u64, horizon: u64 },

    /// An experiment or step configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// No steady state exists for the requested parameters.
    #[error("batch too small for steady state: zeta^2 sigma^2 / B^2 = {noise_to_signal} >= 1")]
    NoSteadyState { noise_to_signal: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
