use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlatError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch for {tensor}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value in {tensor} at flat index {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("missing file {path} (tensor {tensor})")]
    MissingFile { path: PathBuf, tensor: String },

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("rank {rank} out of range 1..={max} ({what})")]
    RankOutOfRange { what: String, rank: usize, max: usize },

    #[error("matrix {what} is not symmetric: max |C - C^T| = {deviation:e} (scale {scale:e})")]
    Asymmetric {
        what: String,
        deviation: f64,
        scale: f64,
    },

    #[error("matrix {what} is not positive semidefinite: eigenvalue {eigenvalue:e} vs largest {largest:e}")]
    NotPsd {
        what: String,
        eigenvalue: f64,
        largest: f64,
    },

    #[error("singular selected block in {what} after ridge damping {damping:e}")]
    Singular { what: String, damping: f64 },

    #[error("invalid importance scores: {0}")]
    InvalidScores(String),

    #[error("invalid sparsity {0}: must lie in [0, 1)")]
    InvalidSparsity(f64),

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<FlatError>,
    },
}

impl FlatError {
    pub fn in_layer(self, layer: usize) -> Self {
        FlatError::Layer {
            layer,
            source: Box::new(self),
        }
    }

    pub fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        FlatError::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    /// Errors raised by the numerical kernels rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        match self {
            FlatError::Asymmetric { .. } | FlatError::NotPsd { .. } | FlatError::Singular { .. } => {
                true
            }
            FlatError::Layer { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
