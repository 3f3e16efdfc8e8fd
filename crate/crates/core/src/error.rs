use alloc::string::String;

/// Errors raised by the imputation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix trace must be positive, got {0}")]
    NonPositiveTrace(f64),
    #[error("shrinkage intensity must lie in [0, 1], got {0}")]
    InvalidGamma(f64),
    #[error("ridge penalty must be positive, got {0}")]
    InvalidTau(f64),
    #[error("design cross-product plus prior precision is singular")]
    SingularDesign,
    #[error("observed-block covariance is ill-conditioned after {retries} jitter retries")]
    IllConditioned { retries: usize },
    #[error("degrees of freedom {nu} too small for dimension {p}")]
    DegreesOfFreedomTooSmall { nu: f64, p: usize },
    #[error("hypergeometric parameter c hits a non-positive integer at term {0}")]
    InvalidC(usize),
    #[error("column {0} has zero variance")]
    DegenerateColumn(usize),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("column {column} has {observed} observed cells, need {needed}")]
    InsufficientObserved { column: usize, observed: usize, needed: usize },
    #[error("column {0} has no observed cells")]
    AllMissingColumn(usize),
    #[error("need at least 8 complete rows, got {0}")]
    TooFewCompleteRows(usize),
    #[error("could not draw a mask satisfying per-column constraints in {0} attempts")]
    MaskConstraint(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
