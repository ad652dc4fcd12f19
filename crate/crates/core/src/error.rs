use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: dimension {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("rank mismatch in {op}: rank {left} vs {right}")]
    RankMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("element count {count} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, count: usize },
    #[error("zero-sized extent in shape {0:?}")]
    EmptyShape(Vec<usize>),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("pop_scope called with an empty scope stack")]
    ScopeUnderflow,
    #[error("activation budget of {budget} bytes exceeded ({requested} bytes requested)")]
    BudgetExceeded { budget: u64, requested: u64 },
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Io(err.to_string())
    }
}
