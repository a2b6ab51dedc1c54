//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Basis specification that cannot be built (bad K, degree, knots).
    #[error("invalid basis specification: {0}")]
    Spec(String),

    /// Malformed in-memory input (non-finite covariates, non-binary indicators, shape mismatch).
    #[error("invalid input: {0}")]
    Input(String),

    /// Sample Gram matrix is singular beyond repair.
    #[error("basis is rank deficient: {0}")]
    Rank(String),

    #[error("{family}: argument {value} is outside the domain")]
    Domain { family: &'static str, value: f64 },

    #[error("distance is not strictly convex: {0}")]
    Convexity(String),

    #[error("objective is not finite and backtracking could not restore it")]
    NonFinite,

    #[error("Newton did not converge after {iterations} iterations (|grad|_inf = {grad_norm:e})")]
    MaxIter { iterations: usize, grad_norm: f64 },

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("primal calibration problem is infeasible: {0}")]
    Infeasible(String),

    #[error("weak instrument: min |delta_D| = {min_abs_delta:e}")]
    WeakInstrument { min_abs_delta: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("every tuning grid point failed")]
    AllFailed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("oracle mismatch: closed form {closed_form} vs quadrature {quadrature}")]
    OracleMismatch { closed_form: f64, quadrature: f64 },

    #[error("{failed} of {reps} replications failed (budget is 2%)")]
    TooManyFailures { failed: usize, reps: usize },

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status used by the command line front-end:
    /// 1 for I/O and parse problems, 2 for everything raised by estimation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Csv(_) | Error::Parse { .. } | Error::Input(_) => 1,
            _ => 2,
        }
    }
}
