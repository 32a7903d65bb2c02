use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller-side precondition was violated (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid user-supplied input (token out of range, unknown component, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: u64, loss: f64 },

    /// Not enough components of some kind remain to draw a capacity-matched control.
    #[error(
        "control infeasible: need {heads} heads and {mlps} MLPs outside the target set, \
         only {heads_available} heads and {mlps_available} MLPs remain"
    )]
    ControlInfeasible {
        heads: usize,
        mlps: usize,
        heads_available: usize,
        mlps_available: usize,
    },

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
