use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectory space of {count} sequences exceeds the enumeration cap of {cap}")]
    CapExceeded { count: u128, cap: u64 },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("sequence has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("behavior policy has mass below 1e-300 on a target-supported trajectory")]
    ZeroMass,

    #[error("weight bound violated: max per-token weight {weight} exceeds {bound}")]
    BoundViolated { weight: f64, bound: f64 },

    #[error("demonstration failed verification after {attempts} attempts")]
    DemoVerification { attempts: usize },

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}
