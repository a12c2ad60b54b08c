//! Training-free structural compression for toy decoder-only transformers.
//!
//! The pipeline calibrates on activation statistics, compresses attention
//! value/output (and optionally query/key) weights with head-wise PCA,
//! allocates per-decoder ranks from input/output angular deviation, and
//! compresses MLP blocks with a ridge-leverage Nyström approximation.
//!
//! * [`model`] / [`checkpoint`]: data model and on-disk format
//! * [`forward`] / [`calibration`]: forward pass and activation capture
//! * [`pca`]: symmetric eigendecomposition and truncation
//! * [`attention`], [`mlp`], [`compress`]: the compression stages
//! * [`iprs`]: rank allocation
//! * [`verify`]: identity checks, allocation oracle, reconstruction reports

pub mod attention;
pub mod calibration;
pub mod checkpoint;
pub mod compress;
pub mod error;
pub mod exec;
pub mod forward;
pub mod iprs;
pub mod mlp;
pub mod model;
pub mod pca;
pub mod verify;

pub use error::{FlatError, Result};
pub use exec::Exec;
pub use model::{CompressedModel, Model, ModelConfig};
