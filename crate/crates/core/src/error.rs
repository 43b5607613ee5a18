use thiserror::Error;

/// Errors raised by the model, solvers and data loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("pricing function violates the monotonicity axiom: {0}")]
    InvalidPricing(String),

    #[error("bracketing failed: searched [{lo}, {hi}] without a sign change")]
    Bracket { lo: f64, hi: f64 },

    #[error("optimizer failed at s = {s} (phase {phase}): {reason}")]
    Optimizer { s: f64, phase: usize, reason: String },

    #[error("value iteration did not converge in {iterations} iterations (last residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("regressor `{0}` is collinear with the preceding columns")]
    Collinear(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Bracket { .. }
                | Error::Optimizer { .. }
                | Error::NoConvergence { .. }
                | Error::Invariant(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
