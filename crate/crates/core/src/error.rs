use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("transition row P[{state}][{action}] sums to {sum}, expected 1")]
    NonStochasticRow { state: usize, action: usize, sum: f64 },

    #[error("initial distribution sums to {sum}, expected 1")]
    NonStochasticInit { sum: f64 },

    #[error("negative or non-finite entry {value} in {what}")]
    NegativeEntry { what: &'static str, value: f64 },

    #[error("reward R[{state}][{action}] = {value} outside [0, {r_max}]")]
    RewardOutOfRange {
        state: usize,
        action: usize,
        value: f64,
        r_max: f64,
    },

    #[error("discount {0} outside [0, 1)")]
    DiscountOutOfRange(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("policy row {state} sums to {sum}, expected 1")]
    NonStochasticPolicy { state: usize, sum: f64 },

    #[error("pi({action}|{state}) = 0 while an entropy term needs ln pi")]
    ZeroProbabilityAction { state: usize, action: usize },

    #[error("linear system is singular")]
    SingularSystem,

    #[error("no convergence after {iterations} sweeps (last change {residual})")]
    MaxIterExceeded { iterations: usize, residual: f64 },

    #[error("regularization weight must be positive and finite, got {0}")]
    InvalidLambda(f64),

    #[error("data distribution has zero mass at ({state}, {action})")]
    ZeroSupport { state: usize, action: usize },

    #[error("data distribution sums to {sum}, expected 1")]
    NonStochasticDistribution { sum: f64 },

    #[error("class member violates its box/log constraint: {0}")]
    ClassConstraint(String),

    #[error("infeasible class specification: {0}")]
    InfeasibleSpec(String),

    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),

    #[error("invalid bound input: {0}")]
    InvalidInput(String),

    #[error("lambda {lambda} exceeds the sample-complexity premise bound {limit}")]
    LambdaTooLarge { lambda: f64, limit: f64 },

    #[error("negative input to the quadratic-inequality root: {0}")]
    NegativeInput(f64),

    #[error("output policy is not a member of the policy class")]
    PolicyNotInClass,

    #[error("dataset ensemble has {got} members, need at least {need}")]
    EnsembleTooSmall { got: usize, need: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("refusing to overwrite existing output in {0} (use --force)")]
    OutputExists(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
