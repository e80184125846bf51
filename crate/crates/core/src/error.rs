//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("{graph} graph disconnected")]
    Disconnected { graph: &'static str },

    #[error("{name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },

    #[error("communication weights must be symmetric and nonnegative: {0}")]
    BadCommWeights(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("voltage at node {node} is {value} V; load model requires V > 0")]
    VoltageDomain { node: usize, value: f64 },

    #[error("node {node} carries a non-ZIP load (exponent {exponent}); the existence certificate requires r = 0")]
    NonZipLoad { node: usize, exponent: f64 },

    #[error("constrained power-flow map singular: {0}")]
    SingularMap(String),

    #[error("contraction parameter Delta = {delta} >= 1; no convergence guarantee")]
    Infeasible { delta: f64 },

    #[error("solver did not converge in {iterations} iterations (last residual {last_residual:e})")]
    NoConvergence {
        iterations: usize,
        last_residual: f64,
        residual_history: Vec<f64>,
    },

    #[error("fixed-point iterate left the contraction box at iteration {iteration}")]
    IterationDiverged { iteration: usize },

    #[error("invalid gains: {0}")]
    InvalidGains(String),

    #[error("event at t = {time} s does not fall on the integration grid (dt = {dt} s)")]
    EventOffGrid { time: f64, dt: f64 },

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("input residual too large: {residual:e} > {tolerance:e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },

    #[error("scenario phase `{phase}` failed: {reason}")]
    PhaseFailed { phase: String, reason: String },

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("precondition not met: {0}")]
    Precondition(String),

    #[error("internal consistency check failed: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
