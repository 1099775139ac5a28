//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by oracles, the optimizer, and the distributed simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had a different length than the context requires.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// An operation that needs at least one sample received an empty batch.
    #[error("empty batch")]
    EmptyBatch,

    /// An operation that needs stored curvature pairs ran on an empty memory.
    #[error("empty curvature memory")]
    EmptyMemory,

    /// A batch (or worker count) exceeded the available population.
    #[error("requested {requested} from a population of {available}")]
    NotEnough { requested: usize, available: usize },

    /// A sample index pointed outside the dataset.
    #[error("sample index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },

    /// An internal invariant that callers cannot trigger through the public
    /// API was violated (e.g. a stored curvature pair with `y's <= 0`).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A data file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The requested operation is not defined for this loss.
    #[error("unsupported loss: {0}")]
    UnsupportedLoss(String),

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
