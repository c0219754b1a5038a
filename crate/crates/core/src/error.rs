use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("axis {axis} out of range for rank {ndim}")]
    AxisOutOfRange { axis: usize, ndim: usize },

    #[error("cannot view {from:?} as {to:?}: element counts differ")]
    ElementCount { from: Vec<usize>, to: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable belongs to a tape generation that has been reset")]
    StaleVar,

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("class value {value} out of range for {classes} classes")]
    ClassOutOfRange { value: usize, classes: usize },

    #[error("{0}: unsupported image format (expected binary P5)")]
    UnsupportedFormat(String),

    #[error("{0}: unsupported maxval {1} (expected 255)")]
    UnsupportedMaxval(String, usize),

    #[error("{0}: truncated file")]
    Truncated(String),

    #[error("{0}: malformed header")]
    MalformedHeader(String),

    #[error("image {0} has no matching mask")]
    MissingMask(String),

    #[error("mask {0} has no matching image")]
    MissingImage(String),

    #[error("sample {id}: image is {image:?} but mask is {mask:?}")]
    SampleShape {
        id: String,
        image: Vec<usize>,
        mask: Vec<usize>,
    },

    #[error("split.txt line {line}: {msg}")]
    MalformedSplit { line: usize, msg: String },

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeDisagreement {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by files on disk: dataset, checkpoint and IO errors.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::ClassOutOfRange { .. }
                | Error::UnsupportedFormat(_)
                | Error::UnsupportedMaxval(..)
                | Error::Truncated(_)
                | Error::MalformedHeader(_)
                | Error::MissingMask(_)
                | Error::MissingImage(_)
                | Error::SampleShape { .. }
                | Error::MalformedSplit { .. }
                | Error::BadMagic
                | Error::ShapeDisagreement { .. }
                | Error::MissingTensor(_)
                | Error::Io { .. }
        )
    }
}
