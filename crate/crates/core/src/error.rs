use thiserror::Error;

/// Errors raised by the geometry, synthesis and training layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point at depth {depth} is not in front of the camera")]
    NonPositiveDepth { depth: f64 },

    #[error("shape mismatch: expected {expected}, got {actual} ({what})")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("at least 2 correspondences are required, got {0}")]
    TooFewCorrespondences(usize),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid keypoint regressor: {0}")]
    InvalidRegressor(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("did not converge after {iters} iterations (residual {residual:e})")]
    DidNotConverge { iters: usize, residual: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::DegenerateGeometry(_) | Error::TooFewCorrespondences(_)
        )
    }
}
