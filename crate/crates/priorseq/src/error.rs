use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("mask is empty for the current context")]
    MaskEmpty,
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no feature grid for item `{0}`")]
    MissingFeature(String),
    #[error("malformed input at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("dimension mismatch for item `{id}`: expected {expected}, got {got}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty reference set")]
    EmptyReferences,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
