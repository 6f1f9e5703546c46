//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VisaError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid top-k: k={k} must satisfy 1 <= k <= {max}")]
    InvalidTopK { k: usize, max: usize },

    #[error("degenerate batch: anchor {anchor} has no {missing} in the batch")]
    DegenerateBatch { anchor: usize, missing: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("protocol '{protocol}' produced an empty {which} set")]
    EmptyProtocolSet { protocol: String, which: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in component '{component}' at epoch {epoch} step {step}")]
    NonFiniteLoss {
        component: String,
        epoch: usize,
        step: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, VisaError>;

impl From<serde_json::Error> for VisaError {
    fn from(e: serde_json::Error) -> Self {
        VisaError::Serde(e.to_string())
    }
}

impl From<image::ImageError> for VisaError {
    fn from(e: image::ImageError) -> Self {
        VisaError::Io(std::io::Error::other(e.to_string()))
    }
}
