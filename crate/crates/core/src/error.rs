use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is below the zero-norm threshold")]
    ZeroNorm(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("invalid view: {0}")]
    InvalidView(String),
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),
    #[error("bad histogram edges: {0}")]
    BadEdges(String),
    #[error("batch too small: contrastive losses need at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty evaluation set")]
    EmptySet,
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
