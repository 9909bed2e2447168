use thiserror::Error;

/// Errors produced by model loading, analysis, and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("zero denominator polynomial")]
    ZeroDenominator,

    #[error("evaluation at a pole on the imaginary axis (omega = {omega} rad/s)")]
    PoleOnAxis { omega: f64 },

    #[error("network solve did not converge at t = {t:.6} s: residual {residual:.3e} after {iterations} iterations")]
    SolverDiverged {
        t: f64,
        residual: f64,
        iterations: usize,
    },

    #[error("loss of synchronism at t = {t:.6} s: unit {unit} angle {delta:.4} rad exceeds +/- pi/2")]
    LossOfSynchronism { t: f64, unit: String, delta: f64 },

    #[error("unknown unit id: {0}")]
    UnknownUnit(String),

    #[error("unknown controller: {0}")]
    UnknownController(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
