use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid must be strictly increasing (violated at index {0})")]
    UnorderedGrid(usize),

    #[error("value {value} outside admissible range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("alpha_p premise failed: {0}")]
    AlphaPremise(String),

    #[error("offset trajectory violates continuity assumption at t = {time}: {reason}")]
    OffsetAssumption { time: f64, reason: String },

    #[error("no samples found in the verification region")]
    NoSamples,

    #[error("gradient unavailable or non-finite at {0:?}")]
    Gradient(Vec<f64>),

    #[error("parameter {0:?} lies outside the family's parameter set")]
    ParameterOutOfSet(Vec<f64>),

    #[error("simulation diverged at t = {0}")]
    Diverged(f64),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
