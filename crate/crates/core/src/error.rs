use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate utterance id `{0}`")]
    DuplicateUtterance(String),

    #[error("unknown dialect tag `{0}`")]
    UnknownDialect(String),

    #[error("dialect {dialect} has {found} speaker(s); at least 2 are required")]
    InsufficientSpeakers { dialect: String, found: usize },

    #[error("phone `{phone}` is not in the phone inventory (word `{word}`)")]
    PhoneNotInInventory { phone: String, word: String },

    #[error("audio is empty after silence trimming")]
    EmptyAfterTrim,

    #[error("audio has {samples} samples, shorter than one {frame}-sample frame")]
    AudioTooShort { samples: usize, frame: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{components} mixture components need at least as many frames, got {frames}")]
    TooFewFrames { components: usize, frames: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("alignment infeasible: {required} frames required, {available} available")]
    AlignmentInfeasible { required: usize, available: usize },

    #[error("unknown unit `{0}`")]
    UnknownUnit(String),

    #[error("search failure: no path survived to the end of the utterance")]
    SearchFailure,

    #[error("unknown word `{0}`")]
    UnknownWord(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid model file: {0}")]
    InvalidModel(String),

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code: 2 for data problems, 3 for compute failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_)
            | Error::AlignmentInfeasible { .. }
            | Error::SearchFailure
            | Error::Divergence(_)
            | Error::TooFewFrames { .. } => 3,
            _ => 2,
        }
    }
}
