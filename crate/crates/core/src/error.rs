use thiserror::Error;

use crate::graph::VariableKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A key, block layout or frame did not match what an operation expected.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("variable {0} is not present in the values")]
    MissingKey(VariableKey),

    /// Levenberg-Marquardt could not find a descent step even at maximum damping.
    #[error("optimization diverged after {iterations} iterations (lambda = {lambda:e})")]
    Diverged { iterations: usize, lambda: f64 },

    /// The information matrix is singular along the requested variable.
    #[error("variable {0} is unobservable (singular information)")]
    Unobservable(VariableKey),

    #[error("degenerate marginalization: eliminated block is singular beyond regularization")]
    DegenerateMarginalization,

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("no preintegrated IMU segment between keyframes {from} and {to}")]
    DataGap { from: u32, to: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("tracking lost: {0}")]
    TrackingLost(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
