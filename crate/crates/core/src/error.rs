use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KanError {
    #[error("invalid domain: a = {a} must be strictly less than b = {b}")]
    InvalidDomain { a: f64, b: f64 },

    #[error("invalid {what}: {value}")]
    InvalidArgument { what: &'static str, value: String },

    #[error("knots must be strictly increasing (t[{index}] = {left} >= t[{next}] = {right})", next = .index + 1)]
    DegenerateKnots { index: usize, left: f64, right: f64 },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("NaN encountered in {0}")]
    NotANumber(&'static str),

    #[error("fine knot set does not contain the coarse knot {0}")]
    NotNested(f64),

    #[error("layer basis mismatch: {0}")]
    BasisMismatch(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("size guard exceeded: {what} = {value} > {limit}")]
    SizeGuard {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, KanError>;

pub(crate) fn shape_err(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> KanError {
    KanError::ShapeMismatch {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
