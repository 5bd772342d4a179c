use nalgebra::DVector;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{evaluator} returned dimension {got}, expected {expected}")]
    Dimension {
        evaluator: &'static str,
        expected: String,
        got: String,
    },

    #[error("{evaluator} disagrees with central finite differences (relative error {rel_err:.3e} at {point})")]
    DerivativeMismatch {
        evaluator: &'static str,
        point: String,
        rel_err: f64,
    },

    #[error("integration exceeded the step budget of {max_steps} at t = {t}")]
    StepBudget { max_steps: usize, t: f64 },

    #[error("integration diverged: non-finite value at t = {t}")]
    Divergence { t: f64 },

    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    /// Raised by a right-hand side to ask the integrator to retry the
    /// current step at half size (used to keep t_f above t0).
    #[error("trial step rejected by the right-hand side at t = {t}")]
    RejectStep { t: f64 },

    #[error("t = {t} lies outside [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("basis columns are linearly dependent (min eigenvalue {lambda_min:.3e}, max {lambda_max:.3e}); null direction {direction}")]
    DependentBasis {
        lambda_min: f64,
        lambda_max: f64,
        direction: DVector<f64>,
    },

    #[error("{what} is not numerically positive-definite; the control sensitivity columns must be mutually independent")]
    Rank { what: &'static str },

    #[error("multiplier matrix is singular; the terminal constraint Jacobian must have full column rank ({context})")]
    MultiplierRank { context: &'static str },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn dim(evaluator: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            evaluator,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
