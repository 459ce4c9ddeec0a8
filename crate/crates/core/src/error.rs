use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("size mismatch: header expects {expected} bytes, payload has {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate window: lo {lo} must be below hi {hi}")]
    DegenerateWindow { lo: f64, hi: f64 },

    #[error("degenerate axis: {0}")]
    DegenerateAxis(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("contradictory clamp: node {0} has infinite links to both terminals")]
    ContradictoryClamp(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("model found nothing: no RECIST pixel has positive foreground probability")]
    ModelFoundNothing,

    #[error("AVD undefined: {0} mask is empty")]
    AvdUndefined(&'static str),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
