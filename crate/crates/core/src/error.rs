use alloc::string::String;
use alloc::vec::Vec;

use crate::capture::Violation;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{what} = {value} is outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: usize,
        min: usize,
        max: usize,
    },

    #[error("invalid parameter {what}: {reason}")]
    InvalidParameter { what: &'static str, reason: String },

    #[error("empty input: {what}")]
    Empty { what: &'static str },

    #[error("{what} is the zero vector")]
    ZeroVector { what: &'static str },

    #[error("power iteration did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("training diverged at step {step}: loss rose for {window} consecutive steps (loss {loss:e}, grad norm {grad_norm:e})")]
    Diverged {
        step: usize,
        window: usize,
        loss: f64,
        grad_norm: f64,
    },

    #[error("initial router is outside the small-logit regime: max logit norm {max_logit_norm} > {limit}")]
    NotSmallLogit { max_logit_norm: f64, limit: f64 },

    #[error("no valid pairs: all {excluded} pairs involve a zero-norm row")]
    NoValidPairs { excluded: usize },

    #[error("sequence {sequence} has no label {key}")]
    MissingLabel { sequence: String, key: String },

    #[error("sequence {sequence} has no prompt boundary")]
    MissingBoundary { sequence: String },

    #[error("unknown sequence {0}")]
    UnknownSequence(String),

    #[error("layer structure mismatch: {0}")]
    LayerMismatch(String),

    #[error("capture validation failed with {} violation(s)", .0.len())]
    Validation(Vec<Violation>),
}
