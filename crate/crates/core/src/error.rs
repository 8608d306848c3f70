use thiserror::Error;

/// Errors raised by the library. Degenerate-but-meaningful outcomes (undefined
/// singular splittings, failed certificates) are reported in result types instead.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("diffeomorphism rejected: {0}")]
    InvalidDiffeo(String),
    #[error("inverse did not converge after {iterations} iterations (residual {residual:e})")]
    InverseNonConvergence { iterations: usize, residual: f64 },
    #[error("enumeration of {count} words exceeds cap {cap}; use Monte Carlo sampling")]
    EnumerationCap { count: f64, cap: usize },
    #[error("singular splitting undefined: {0}")]
    Undefined(String),
    #[error("declined: {0}")]
    Declined(String),
    #[error("grid too coarse: cell {cell} exceeds rho/4 = {limit}")]
    GridTooCoarse { cell: f64, limit: f64 },
    #[error("constants violate invariants: {0}")]
    Constants(String),
}

pub type Result<T> = std::result::Result<T, Error>;
