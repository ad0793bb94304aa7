use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("unknown language `{0}`")]
    Language(String),

    #[error("source already carries a language tag")]
    AlreadyTagged,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("operation `{op}` is not available under variant `{variant}`")]
    Variant { op: &'static str, variant: String },

    #[error("degenerate batch: every target position is padding")]
    DegenerateBatch,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("backward error: {0}")]
    Backward(&'static str),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing visual tokens for image `{0}`")]
    MissingImage(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: impl TryInto<u64>, message: impl Into<String>) -> Self {
        Error::Format {
            offset: offset.try_into().unwrap_or(u64::MAX),
            message: message.into(),
        }
    }
}
