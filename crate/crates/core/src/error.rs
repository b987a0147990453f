use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}, expected {expected}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward was already run on this tape")]
    BackwardTwice,

    #[error("non-finite gradient in parameter `{name}` at offset {offset}")]
    NonFiniteGradient { name: String, offset: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("length mismatch: {what} has {actual} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {found}")]
    BadVersion { path: PathBuf, found: u32 },

    #[error("{path}: unsupported dtype code {found}")]
    BadDtype { path: PathBuf, found: u8 },

    #[error("{path}: dimensions {dims:?} overflow the addressable size")]
    DimOverflow { path: PathBuf, dims: Vec<u32> },

    #[error("{path}: truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        section: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: {actual} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, actual: usize },

    #[error("{path}: malformed content: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("label {label} at position {index} is out of range for {class_count} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        class_count: usize,
    },

    #[error("class {class} needs {needed} samples but only {available} are available (deficit {})", needed - available)]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("{classes} classes cannot be split evenly into {steps} tasks")]
    UnevenSplit { classes: usize, steps: usize },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("no centroid for class {0}")]
    MissingCentroid(usize),

    #[error("no weight for class {0}")]
    MissingWeight(usize),

    #[error("class {0} is not part of the classifier head")]
    UnknownClass(usize),

    #[error("task {got} arrived out of order, expected task {expected}")]
    OutOfOrderTask { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
