use thiserror::Error;

use crate::absde::PicardReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {what} / dt = {ratio} is not an integer")]
    GridMismatch { what: &'static str, ratio: f64 },

    #[error("bad control interval [{lo}, {hi}]")]
    BadInterval { lo: f64, hi: f64 },

    #[error("initial segment is not finite at s = {s}")]
    NonFiniteSegment { s: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("objective estimate is not finite")]
    NonFiniteObjective,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("bump window [{start}, {end}] is not inside [0, {horizon}]")]
    BadWindow { start: f64, end: f64, horizon: f64 },

    #[error("Picard iteration did not converge after {} iterations", .report.iterations)]
    NoConvergence { report: Box<PicardReport> },

    #[error("weight lambda = {} is too small: contraction ratio >= 1 for 3 consecutive iterations", .report.weight_lambda)]
    BadWeight { report: Box<PicardReport> },

    #[error("adjoint missing: {0}")]
    AdjointMissing(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("divergent integral: {0}")]
    DivergentIntegral(String),

    #[error("bisection bracket shows no sign change")]
    NoSignChange,

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// The Picard report carried by solver failures, if any.
    pub fn picard_report(&self) -> Option<&PicardReport> {
        match self {
            Error::NoConvergence { report } | Error::BadWeight { report } => Some(report),
            _ => None,
        }
    }
}
