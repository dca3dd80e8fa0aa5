use thiserror::Error;

use crate::oracle::Condition;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("time {t} is outside [0, {t_max}]")]
    TimeOutOfRange { t: f64, t_max: f64 },

    #[error("step index {index} is outside 1..={steps}")]
    StepOutOfRange { index: usize, steps: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("condition {0} is not registered")]
    UnknownCondition(Condition),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} is not reachable on the grid")]
    OffGrid { t: f64 },

    #[error("run diverged at step {step}: |x| = {norm:e}")]
    Diverged { step: usize, norm: f64 },

    #[error("library construction failed: {0}")]
    Library(String),

    #[error("metric undefined: {0}")]
    Metric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
