use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    #[error("{path}:{line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("empty modality: {0}")]
    EmptyModality(&'static str),

    #[error("contrastive loss undefined for batch < 2 (got {0})")]
    BatchTooSmall(usize),

    #[error("no class has both the label patterns needed for {0}")]
    NoScorableClasses(&'static str),
}

/// Structured reasons a feature file is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown modality tag {0}")]
    BadModality(u8),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("empty sequence")]
    EmptySequence,
    #[error("segment {index}: end_ms {end_ms} must exceed start_ms {start_ms}")]
    EmptyInterval {
        index: usize,
        start_ms: u32,
        end_ms: u32,
    },
    #[error("segment {index} is unsorted or overlaps its predecessor")]
    UnsortedIntervals { index: usize },
    #[error("encoder-shaped {modality} features must have width {expected}, found {found}")]
    EncoderWidth {
        modality: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("value count {found} does not match {segments} x {dim}")]
    ValueCount {
        segments: usize,
        dim: usize,
        found: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
