use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("image dimensions {height}x{width} are not divisible by {stride}; pad to a multiple of {stride} first")]
    PaddingRequired {
        height: usize,
        width: usize,
        stride: usize,
    },

    #[error("guidance required: model was trained with a guidance image")]
    GuidanceRequired,

    #[error("non-finite loss at iteration {iteration} (last finite loss: {last_finite:?})")]
    NonFiniteLoss {
        iteration: usize,
        last_finite: Option<f64>,
    },

    #[error("checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("image: malformed header: {0}")]
    MalformedHeader(String),

    #[error("image: unexpected end of file")]
    UnexpectedEof,

    #[error("image: unsupported maxval {0}")]
    UnsupportedMaxval(u32),

    #[error("image: unsupported format {0}")]
    UnsupportedFormat(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
