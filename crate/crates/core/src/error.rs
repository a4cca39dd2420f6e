use thiserror::Error;

/// Errors raised by the sampling and estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("segment {index} has no human score (oracle operations need a fully rated test set)")]
    MissingScore { index: usize },

    #[error("sample size {n} out of range [1, {max}]")]
    SampleSizeOutOfRange { n: usize, max: usize },

    #[error("empty draw")]
    EmptyDraw,

    #[error("population of size {0} is too small (need at least 2)")]
    PopulationTooSmall(usize),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid test set: {0}")]
    InvalidTestSet(String),

    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumeration of {count} draws exceeds the limit of {limit}")]
    TooManyDraws { count: u128, limit: u128 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown config key `{key}` (valid keys: {valid})")]
    UnknownConfigKey { key: String, valid: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("session is complete")]
    SessionComplete,

    #[error("segment {0} is not the pending segment")]
    NotPending(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
