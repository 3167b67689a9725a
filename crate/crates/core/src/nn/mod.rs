//! A minimal reverse-mode autodiff substrate over dense f64 tensors.
//!
//! Nothing here knows about trading or detectors; the module provides
//! exactly what the models need and no more:
//!
//! - [`Tensor`]: dense row-major storage plus deterministic matrix kernels.
//! - [`Var`]: a node in a dynamically built computation graph; [`ops`] builds
//!   graphs, [`Var::backward`] runs reverse-mode accumulation from a scalar.
//! - [`ParamSet`]: named parameter tensors, bound to fresh graph leaves each
//!   forward pass.
//! - [`Adam`]: the optimizer, keyed by parameter name.
//! - [`gradcheck`]: central finite-difference verification of any op or model.
//! - [`Checkpoint`]: a versioned binary format for parameters and run state.

mod checkpoint;
mod graph;
pub mod gradcheck;
pub mod ops;
mod optim;
mod params;
mod tensor;


pub use checkpoint::{BestMetrics, Checkpoint, CHECKPOINT_MAGIC};
pub use graph::Var;
pub use optim::{Adam, AdamConfig};
pub use params::{BoundParams, ParamSet};
pub use tensor::Tensor;

/// Errors from tensor construction, graph evaluation, and checkpoint I/O.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("backward requires a scalar output, got shape [{0}]")]
    NonScalarOutput(String),

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("label out of range: {0} (labels must be 0 or 1)")]
    LabelOutOfRange(f64),

    #[error("segment too short: {0}")]
    SegmentTooShort(String),

    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}
