use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("operation requires complete data but the matrix has {0} missing entries")]
    MissingData(usize),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} did not converge after {iterations} iterations")]
    Convergence { what: &'static str, iterations: usize },

    #[error("numerically singular system in {what} (condition estimate {condition:.3e})")]
    Singularity { what: &'static str, condition: f64 },

    #[error("noise level collapsed to {noise_level:.3e} (threshold {threshold:.3e}); the data lie on the principal subspace, fit with zero-noise EM instead")]
    Collapse { noise_level: f64, threshold: f64 },

    #[error("matrix is not positive semi-definite: pivot {pivot:.3e} at index {index}")]
    NotPsd { index: usize, pivot: f64 },

    #[error("position ({x}, {y}) lies outside the {width}x{height} frame")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("degenerate observation system: all spatial gradients vanish")]
    DegenerateSystem,

    #[error("perfect registration: compensated error is zero, improvement is infinite")]
    PerfectRegistration,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
