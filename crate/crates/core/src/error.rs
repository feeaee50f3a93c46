use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("missing labels file: {0}")]
    MissingLabels(PathBuf),

    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),

    #[error("invalid mask value {value} in {sample} (labels 0..{num_labels}, ignore {ignore})")]
    InvalidMaskValue {
        sample: String,
        value: u8,
        num_labels: usize,
        ignore: u8,
    },

    #[error("size mismatch for {sample}: image {image_hw:?}, mask {mask_hw:?}")]
    SizeMismatch {
        sample: String,
        image_hw: (usize, usize),
        mask_hw: (usize, usize),
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing label {0:?} in word-vector file")]
    MissingLabel(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("no present classes in confusion matrix")]
    NoPresentClasses,

    #[error("non-finite loss term {term} at step {step}: {value}")]
    NonFiniteLoss {
        term: String,
        step: usize,
        value: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
