use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("kernel matrix is not positive definite (coincident or nearly coincident landmarks)")]
    SingularKernel,

    #[error("integration diverged at step {step}")]
    IntegrationDiverged { step: usize },

    #[error("step size {h} does not divide the interval {interval}")]
    InvalidStep { h: f64, interval: f64 },

    #[error("time {t} lies outside the path interval [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("joint covariance needs {required} bytes, budget is {budget}")]
    MemoryBudget { required: usize, budget: usize },

    #[error("observation covariance is not positive definite")]
    IllConditionedObservation,

    #[error("landmarks {i} and {j} coincide, pair direction undefined")]
    DegeneratePair { i: usize, j: usize },

    #[error("curvature matrix has no positive eigenvalues")]
    DegenerateCurvature,
}
