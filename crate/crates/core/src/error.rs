use thiserror::Error;

/// Errors raised by the modelling, fitting and prediction routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (relative mismatch {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite, even after adding jitter {0:e}")]
    NotPositiveDefinite(f64),

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("objective is not finite at a feasible point")]
    ObjectiveNonFinite,

    #[error("every multi-start run failed")]
    AllStartsFailed,

    #[error("basis design matrix is rank deficient")]
    RankDeficientBasis,

    #[error("factorization failed: {0}")]
    FactorizationFailure(String),

    #[error("profiled variance underflowed; residual is degenerate")]
    DegenerateResidual,

    #[error("normal equations of the M-step are singular")]
    SingularNormalEquations,

    #[error("EM log-likelihood decreased from {previous} to {current} at iteration {iteration}")]
    NonMonotoneEM {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("input outside the domain: {0}")]
    DomainViolation(String),

    #[error("ground truth is constant; Q2 is undefined")]
    ConstantTruth,

    #[error("coverage level grid is empty or invalid")]
    EmptyGrid,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
