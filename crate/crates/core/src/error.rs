use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(u32, u32),
    #[error("cube {0} is disjoint from the base domain")]
    DisjointCube(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("vanishing denominator at cube {0}")]
    VanishingDenominator(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("internal consistency: {0}")]
    Inconsistency(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
