use thiserror::Error;

/// Errors raised by assembly, solvers and data pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("normal matrix condition number {condition:.3e} exceeds cap {cap:.1e}; use a regularized solve")]
    IllConditioned { condition: f64, cap: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("field has no derivative; compute it before applying the operator")]
    MissingDerivative,

    #[error("fields are sampled on different grids")]
    GridMismatch,

    #[error("unsupported grid dimension {0}")]
    UnsupportedDimension(usize),

    #[error("adaptive quadrature hit the subdivision depth limit; best estimate {estimate:e}, error estimate {error:e}")]
    QuadratureDepth { estimate: f64, error: f64 },

    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient check failed: relative error {0:.3e}")]
    GradientCheck(f64),

    #[error("loss became non-finite after {steps} steps")]
    Diverged { steps: usize, last_good: Vec<f64> },

    #[error("non-finite particle position in simulation {simulation} at time index {step}")]
    ParticleBlowup { simulation: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
