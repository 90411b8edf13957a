use thiserror::Error;

/// Errors raised by the model, controllers and harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative solver ran out of iterations.
    #[error("{solver} did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// No series resistance in the sweep produced a usable parallel resistance.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// A parameter or scenario document could not be read or decoded.
    #[error("load error: {0}")]
    Load(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
