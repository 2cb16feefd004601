use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("capacity exceeded: requested {requested} samples but only {available} available")]
    Capacity { requested: usize, available: usize },

    #[error("round {round} outside [1, {total}]")]
    RoundOutOfRange { round: usize, total: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("IFS sampling failed: {0}")]
    Sampling(String),

    #[error("orbit diverged after {iterations} iterations")]
    Divergence { iterations: usize },

    #[error("client {client} failed in round {round}: {source}")]
    Client {
        client: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("fractal class {class}: {source}")]
    FractalClass {
        class: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the error originates from a non-finite value somewhere in
    /// the numeric pipeline.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) | Error::Divergence { .. } => true,
            Error::Client { source, .. } | Error::FractalClass { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
