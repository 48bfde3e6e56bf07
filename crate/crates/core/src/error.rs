use thiserror::Error;

/// Errors produced by the model, grid, solver and orchestration layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid specification: {0}")]
    Validation(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("singular Jacobian at Newton iteration {iteration} (residual {residual_norm:.3e}): {detail}")]
    SingularJacobian {
        iteration: usize,
        residual_norm: f64,
        detail: String,
    },

    #[error("inner solve did not converge at epsilon = {epsilon}: residual {residual_norm:.3e} after {iterations} iterations")]
    NotConverged { epsilon: f64, residual_norm: f64, iterations: usize },

    #[error("continuation aborted at epsilon = {epsilon} after {} completed steps: {source}", partial_trace.len())]
    ContinuationFailed {
        epsilon: f64,
        partial_trace: Vec<crate::continuation::TraceRow>,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
