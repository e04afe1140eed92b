//! Crate-wide error type.
//!
//! Each variant corresponds to one error surface: shape mismatches,
//! bad configuration, numeric failures (NaN/Inf), API misuse, invalid
//! object state, parse/ingestion problems, and undefined metrics.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("state error: {0}")]
    State(String),

    #[error("parse error at {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn ingest(msg: impl Into<String>) -> Self {
        Error::Ingest(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
