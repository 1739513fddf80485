use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Raw text and pinyin annotation disagree; `index` is the first
    /// pinyin entry that could not be matched.
    #[error("text/pinyin alignment error at entry {index}: {reason}")]
    TokenAlignment { index: usize, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    /// An utterance phoneme has no matching alignment interval.
    #[error("alignment mismatch at phoneme {index}: {reason}")]
    AlignmentMismatch { index: usize, reason: String },

    #[error("length mismatch in {what}: expected {expected}, got {actual}")]
    LengthMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("parameter `{0}` is frozen and cannot be updated")]
    FrozenParameter(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {what} `{value}`; known: {known}")]
    Unknown {
        what: &'static str,
        value: String,
        known: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn length(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::LengthMismatch {
            what: what.into(),
            expected,
            actual,
        }
    }
}
