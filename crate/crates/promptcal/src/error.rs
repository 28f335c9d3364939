//! Shared error type for the library.

/// Errors surfaced by embedding, tuning, calibration, and data handling.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class {0:?} not found in attribute catalog")]
    MissingClass(String),

    #[error("catalog format error: {0}")]
    Format(String),

    #[error("catalog schema error for class {class:?}: {reason}")]
    Schema { class: String, reason: String },

    #[error("bundle version mismatch: found {found}, supported {supported}")]
    Version { found: u32, supported: u32 },

    #[error("bundle corrupted at byte {offset}: {reason}")]
    Corruption { offset: u64, reason: String },

    #[error("numeric failure at step {step}: {reason}")]
    Numeric { step: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
