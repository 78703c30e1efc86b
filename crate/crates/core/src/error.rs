use thiserror::Error;

/// Errors raised by tree construction, solvers and the stopping-time machinery.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("increment moments violated at {node}: magnitude {magnitude:e}")]
    MomentViolation { node: String, magnitude: f64 },

    #[error("tree would have {nodes} nodes, limit is {limit}")]
    SizeLimit { nodes: u128, limit: usize },

    #[error("bad probability: {0}")]
    BadProbability(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no contraction: K*dt = {0} >= 1")]
    NoContraction(f64),

    #[error("fixed-point iteration did not converge after {iterations} iterations (last change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },

    #[error("bad stopping time: {0}")]
    BadStoppingTime(String),

    #[error("alpha = {0} is outside the admissible range")]
    InvalidAlpha(f64),

    #[error("enumeration needs {count} stopping times, budget is {budget}")]
    BudgetExceeded { count: u128, budget: u64 },

    #[error("not a supermartingale: {0}")]
    NotASupermartingale(String),

    #[error("measurability: {0}")]
    Measurability(String),

    #[error("unknown driver '{name}', known drivers: {known}")]
    UnknownDriver { name: String, known: String },

    #[error("invalid driver parameters: {0}")]
    InvalidDriver(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model format: {0}")]
    Format(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    /// True for numerical failures of the solvers, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::NoContraction(_) | Error::NoConvergence { .. })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
