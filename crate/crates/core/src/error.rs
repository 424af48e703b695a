use thiserror::Error;

use crate::hazard::FamilyKind;

/// Errors produced by model evaluation, fitting, and simulation.
#[derive(Debug, Error)]
pub enum CrmError {
    #[error("{kind} evaluation is not finite at t = {t} (alpha = {alpha}, lambda = {lambda})")]
    Evaluation {
        kind: FamilyKind,
        alpha: f64,
        lambda: f64,
        t: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("no bridge in Khamis-Higgins mode (tau2 == tau1)")]
    NoBridge,

    #[error("dimension mismatch: expected {expected} covariates (with intercept), got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient data per segment: no events in {segment}")]
    InsufficientData { segment: &'static str },

    #[error("cure-coefficient Newton step did not converge (gradient norm {grad_norm:.3e}, beta = {beta:?})")]
    BetaNonConvergence { beta: Vec<f64>, grad_norm: f64 },

    #[error("optimizer failed: {message} (last objective {objective}, iterate {iterate:?})")]
    Optimizer {
        message: String,
        iterate: Vec<f64>,
        objective: f64,
    },

    #[error("every profile candidate failed; first failure at tau2 = {tau2}: {message}")]
    ProfileFailed { tau2: f64, message: String },

    #[error("problem {problem} is not applicable: {reason}")]
    Inapplicable { problem: String, reason: String },

    #[error("target censor fraction {target} unreachable; achievable range is ({low:.4}, {high:.4})")]
    Calibration { target: f64, low: f64, high: f64 },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CrmError>;
