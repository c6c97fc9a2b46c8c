use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum CrelError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("estimating function `{0}` is not smooth; its jacobian is unavailable")]
    NonSmooth(String),

    #[error("zero is not interior to the convex hull of the estimating function values")]
    Hull,

    #[error("no convergence after {iterations} iterations (best residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("expansion error: {0}")]
    Expansion(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("degenerate chain: {0}")]
    Degenerate(String),

    #[error("quadrature error: {0}")]
    Quadrature(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CrelError>;
