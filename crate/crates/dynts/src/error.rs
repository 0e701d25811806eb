//! Error type shared by every module of the crate.

use thiserror::Error;

/// All failures surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes disagree (matrix/vector dimensions, parameter chains).
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A value is outside its valid domain (NaN, Inf, negative count, ...).
    #[error("invalid value: {0}")]
    Value(String),
    /// A configuration or parameter set violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),
    /// A token sequence could not be split into question/think/answer spans.
    #[error("segmentation failed: {0}")]
    Segment(String),
    /// A cache state machine invariant was broken.
    #[error("cache invariant violated: {0}")]
    Cache(String),
    /// Activations handed to a backward pass do not belong to the parameters.
    #[error("stale activation cache: {0}")]
    StaleActivations(String),
    /// Serialization or parse failure of an exported format.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
