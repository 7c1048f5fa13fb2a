use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in {context}{}", path.map(|p| format!(" (path {p})")).unwrap_or_default())]
    NonFinite { context: String, path: Option<usize> },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("unsupported coefficient family: {0}")]
    UnsupportedFamily(String),

    /// `sigma(x) u = b(x) - r x` has no solution at the reported state.
    #[error("arbitrage detected at t = {t}: market price of risk residual {residual:e}")]
    ArbitrageDetected { t: f64, residual: f64 },

    #[error("no analytic Jacobian available: {0}")]
    UnsupportedJacobian(String),

    #[error("ill-conditioned regression at time index {time_index}: condition number {condition:e}")]
    IllConditioned { time_index: usize, condition: f64 },

    #[error("too few samples for regression: {samples} samples for {basis} basis functions")]
    TooFewSamples { samples: usize, basis: usize },

    #[error("time grid of the plan does not match the simulation grid")]
    GridMismatch,

    #[error("seed {0} was used to fit the plan; out-of-sample backtests need a fresh seed")]
    SeedReuse(u64),

    #[error("model hash mismatch: plan was fitted on {plan}, config resolves to {config}")]
    ModelMismatch { plan: String, config: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            path: None,
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
