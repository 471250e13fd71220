use thiserror::Error;

/// Errors raised by the engine.
///
/// Input problems (`Domain`, `Validation`, `Dimension`) are kept apart from
/// failures of the numerics themselves so front ends can map them to
/// different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite model coefficient at t={t}, state={state:?}")]
    NonFiniteCoefficient { t: f64, state: Vec<f64> },

    #[error("path {path} became non-finite at step {step}")]
    PathBlowup { path: usize, step: usize },

    #[error("exponent overflow in moment generating function (max exponent {max_exponent})")]
    ExponentOverflow { max_exponent: f64 },

    #[error(
        "unstable time stepping: total variation grew {growth:.3}x; try dt <= {suggested_dt:e}"
    )]
    Unstable { growth: f64, suggested_dt: f64 },

    #[error("boundary leak: {lost:.3e} of the probability mass left the grid (edge nodes {lo:e}..{hi:e})")]
    BoundaryLeak { lost: f64, lo: f64, hi: f64 },

    #[error("ill-conditioned system (condition number {condition_number:e}); deficient direction {direction:?}")]
    IllConditioned {
        condition_number: f64,
        direction: Vec<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::Validation(_) | Error::Dimension { .. } | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(validation(format!("{name} must be finite, got {value}")))
    }
}
