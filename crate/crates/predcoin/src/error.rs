//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected {expected:?}, got {actual:?}")]
    BadMagic { expected: [u8; 4], actual: [u8; 4] },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("query budget exhausted after {queries_used} queries")]
    BudgetExhausted { queries_used: u64 },

    #[error("partial gradient estimate: budget exhausted after {queries_spent} of {requested} probes")]
    PartialEstimate { queries_spent: u64, requested: u64 },

    #[error("operation unsupported for this oracle: {0}")]
    UnsupportedOracle(&'static str),

    #[error("starting point is not adversarial")]
    NotAdversarial,

    #[error("no adversarial initialization found within {tries} draws")]
    InitFailed { tries: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
