use thiserror::Error;

use crate::mdp::Token;

/// Errors raised by the lab. Contract violations are reported here rather
/// than silently accepted.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("cannot extend terminal prefix {prefix:?}")]
    TerminalPrefix { prefix: Vec<Token> },

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: Token, vocab_size: usize },

    #[error("prefix {0:?} is not a reachable non-terminal context")]
    UnknownContext(Vec<Token>),

    #[error("trajectory {0:?} is not terminal")]
    NotTerminal(Vec<Token>),

    #[error("enumeration budget exceeded: {required} trajectories required, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("hidden token rewards unavailable for this reward model")]
    HiddenRewardsUnavailable,

    #[error("reward model cannot score partial trajectories")]
    PrefixScoringUnavailable,

    #[error("undefined baseline: Var(X2) is zero at this coordinate")]
    UndefinedBaseline,

    #[error("coordinate {coordinate} does not belong to the row of prefix {prefix:?}")]
    CoordinateOutsideRow { prefix: Vec<Token>, coordinate: usize },

    #[error("group estimators need K >= 2 samples, got {0}")]
    GroupTooSmall(usize),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("old policy assigns zero probability to token {token} after {prefix:?}")]
    ZeroOldProbability { prefix: Vec<Token>, token: Token },

    #[error("estimator `{0}` has randomness that cannot be enumerated exactly")]
    NotEnumerable(String),

    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),

    #[error("unknown suite `{0}`")]
    UnknownSuite(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
