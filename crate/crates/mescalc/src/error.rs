use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("dimension {dim} exceeds the configured cap {cap}")]
    DimCap { dim: usize, cap: usize },
    #[error("singular problem: {0}")]
    Singular(String),
    #[error("state marginals are not uniform (deviation {0:.3e})")]
    NonUniformMarginals(f64),
    #[error("basis mismatch: {0}")]
    BasisMismatch(String),
    #[error("enumeration of {count} strategies exceeds the cap {cap}")]
    EnumerationCap { count: u128, cap: u128 },
    #[error("stochastic gate failed after {attempts} attempts: {measurements}")]
    Stochastic { attempts: usize, measurements: String },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
