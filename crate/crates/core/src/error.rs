use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    Vocabulary { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot partition {samples} samples across {clients} clients")]
    Partition { samples: usize, clients: usize },

    #[error("update from client {client} does not match the global generator structure")]
    Aggregation { client: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Numeric(_) => "numeric",
            Error::Index { .. } => "index",
            Error::Vocabulary { .. } => "vocabulary",
            Error::Length { .. } => "length",
            Error::Input(_) => "input",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Partition { .. } => "partition",
            Error::Aggregation { .. } => "aggregation",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
