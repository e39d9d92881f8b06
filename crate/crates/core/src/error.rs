use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated: {0}")]
    Truncated(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("T < 2: a bundle needs at least two frames, got {0}")]
    TooFewFrames(usize),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid file contents: {0}")]
    Format(String),

    #[error("bundle {id:?}: {source}")]
    Bundle {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("duplicate bundle id {0:?}")]
    DuplicateId(String),

    #[error("score set needs both classes (bonafide: {bonafide}, spoof: {spoof})")]
    SingleClass { bonafide: usize, spoof: usize },

    #[error("non-finite score for {0:?}")]
    NonFiniteScore(String),

    #[error("undefined correlation: input is constant")]
    UndefinedCorrelation,

    #[error("degenerate t-DCF parameters: C1 = {c1}, C2 = {c2}")]
    DegenerateTdcf { c1: f64, c2: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by data or configuration.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Bundle { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
