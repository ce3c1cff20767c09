use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum DrlError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("planner did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular linear system while evaluating a policy at gamma = {gamma}")]
    SingularSystem { gamma: f64 },

    #[error("blackwell-unstable: argmax set at state {state} changed across the discount sweep ({detail})")]
    BlackwellUnstable { state: usize, detail: String },

    #[error("tau grid too close to 1: {0}")]
    TauGrid(String),

    #[error("advisor is not epsilon-sane: {0}")]
    NotSane(String),

    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DrlError>;
