//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad channel counts, ratios out of range, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or out-of-contract input data.
    #[error("input error: {0}")]
    Input(String),

    /// Graph is structurally unsound or shapes cannot be resolved.
    #[error("graph error: {0}")]
    Graph(String),

    /// A pruning plan is inconsistent with the graph it is applied to.
    #[error("plan error: {0}")]
    Plan(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Every frame of a clip was skipped; no evidence to classify.
    #[error("no evidence: every sampled frame was skipped")]
    NoEvidence,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
