use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("no record with sensitive value {0}")]
    EmptySubset(usize),
    #[error("insufficient records: {0}")]
    Insufficient(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model is not fitted: {0}")]
    NotFitted(&'static str),
    #[error("training data has a single class")]
    SingleClass,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("config error(s): {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
