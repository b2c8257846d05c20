use thiserror::Error;

/// Errors raised when an input violates a domain precondition.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("empty sequence")]
    Empty,
    #[error("every position is masked out")]
    AllMasked,
    #[error("ratio at index {index} is {value}; ratios must be positive and finite")]
    InvalidRatio { index: usize, value: f64 },
    #[error("log-ratio at index {index} is not finite ({value})")]
    InvalidLogRatio { index: usize, value: f64 },
    #[error("order p must be finite, got {0}")]
    InvalidOrder(f64),
    #[error("zero threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DomainError> = std::result::Result<T, E>;
