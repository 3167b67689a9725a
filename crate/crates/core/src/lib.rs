//! Detection of orchestrated pump-and-dump events in exchange trade streams.
//!
//! The crate is organized as a pipeline:
//!
//! - [`ingest`] — raw trades in, 15-feature chunk rows out (plus the feature
//!   CSV format shared by every tool).
//! - [`dataset`] — chronological split, per-pump windowing with start
//!   reflection, undersampling, the fitted input transform, a binary cache,
//!   and a synthetic fixture generator.
//! - [`nn`] — the f64 tensor/autodiff substrate the detectors are built on,
//!   with finite-difference gradient verification and checkpoint I/O.
//! - [`models`] — the two detectors: a convolutional LSTM and an
//!   association-based transformer trained with a two-phase minimax step.
//! - [`train`] — the train/eval loop, metrics, seeded multi-run summaries,
//!   and the reference results table.
//! - [`replay`] — chunk-at-a-time streaming that reproduces batch scoring
//!   exactly.
//! - [`config`] — the TOML run configuration binding everything together;
//!   the `pumpwatch` binary is a thin layer over it.

pub mod config;
pub mod dataset;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod replay;
pub mod seed;
pub mod train;

pub use config::RunConfig;
pub use dataset::{InputTransform, PreparedDataset, Segment};
pub use ingest::{ChunkFeatures, ChunkSeries, ChunkSize, TradeEvent};
pub use models::{Model, ModelKind};
pub use nn::{Checkpoint, ParamSet, Tensor, Var};
pub use replay::{replay_rows, ReplayEntry, Replayer};
pub use train::{compute_metrics, confidence_interval, Metrics, RunResult, TrainConfig};
