//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("budget violation: allocated {allocated} exceeds remaining {remaining}")]
    BudgetViolation { allocated: f64, remaining: f64 },

    #[error("observation not taken: effort {0} is below the observation threshold")]
    NoObservation(f64),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        /// Best iterate found, so callers can decide whether to proceed.
        best: Vec<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing calibration data: {0}")]
    MissingCalibration(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
