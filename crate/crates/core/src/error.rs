use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate entity id `{0}`")]
    DuplicateEntity(String),

    #[error("top_k = {top_k} would remove all {distinct} distinct relations")]
    TopKTooLarge { top_k: usize, distinct: usize },

    #[error("empty {0} surface")]
    EmptySurface(&'static str),

    #[error("span ({start}, {end}) out of bounds for sequence of length {len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },

    #[error("marker pair for span ({start}, {end}) given twice")]
    DuplicatePair { start: usize, end: usize },

    #[error("decoder target has no loss-bearing slot")]
    EmptyTarget,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("tag inventory is not IOB2: {0}")]
    NotIob2(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Numeric failures (divergence, NaN) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
