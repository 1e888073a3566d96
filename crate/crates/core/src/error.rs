use std::io;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("precision guard tripped: {0}")]
    Precision(String),

    #[error("degenerate normalizer at position {position}")]
    DegenerateNormalizer { position: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("infeasible dataset request: {0}")]
    Infeasible(String),

    #[error("benchmark invalid: {0}")]
    BenchInvalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
