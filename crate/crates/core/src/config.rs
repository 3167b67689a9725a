//! One TOML file drives every subcommand.
//!
//! [`RunConfig`] is the declarative description of a run: where the data
//! comes from (a feature CSV or the synthetic generator), how the pipeline
//! slices it, which detector to build, and how to train it. Sections and
//! fields all have defaults, so the empty document is a valid config; unknown
//! keys anywhere are rejected so typos fail loudly instead of silently
//! training the wrong thing.
//!
//! ```toml
//! [data]
//! feature_csv = "features_15s.csv"
//! chunk_size = 15
//!
//! [model]
//! kind = "anomaly_transformer"
//!
//! [train]
//! seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
//! ```
//!
//! The `PUMPWATCH_SEED` environment variable, when set, overrides
//! `train.seed` — the knob CI uses to fan one config out across seeds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{PipelineConfig, SynthSpec};
use crate::ingest::{ChunkSize, FEATURE_NAMES};
use crate::models::anomaly_transformer::{AnomTransConfig, AnomalyTransformer};
use crate::models::clstm::{CLstm, CLstmConfig};
use crate::models::{Model, ModelKind};
use crate::nn::NnError;
use crate::train::TrainConfig;

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "PUMPWATCH_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The full, validated run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputConfig,
}

/// Where the chunk series comes from and how it becomes segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Pre-aggregated feature CSV to load. Mutually exclusive with `synth`
    /// in practice; when both are present the synthetic source wins.
    pub feature_csv: Option<PathBuf>,
    /// Where `prepare` writes (and `train`/`eval` read) the segment cache.
    /// Defaults to `dataset.pwds` under the output directory.
    pub cache: Option<PathBuf>,
    /// Synthetic fixture source; its own `chunk_size` takes precedence over
    /// `data.chunk_size`.
    pub synth: Option<SynthSpec>,
    /// Chunk width in seconds for CSV input: 5, 15, or 25.
    pub chunk_size: u32,
    /// Sliding-window length s.
    pub segment_length: usize,
    pub train_fraction: f64,
    /// Train-side pumps shorter than this are dropped.
    pub min_pump_chunks: usize,
    /// Fraction of all-negative train segments kept.
    pub undersample: f64,
    /// Feature columns zeroed before standardization, by name.
    pub mask_features: Vec<String>,
    /// Standardize features with train-split statistics.
    pub normalize: bool,
    /// Seed for the pipeline's own randomness (the undersampling draw).
    /// Deliberately separate from `train.seed` so multi-seed runs share one
    /// prepared dataset.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            feature_csv: None,
            cache: None,
            synth: None,
            chunk_size: 15,
            segment_length: 15,
            train_fraction: 0.8,
            min_pump_chunks: 100,
            undersample: 0.05,
            mask_features: vec!["PumpIndex".to_string()],
            normalize: true,
            seed: 0,
        }
    }
}

/// Detector selection plus per-kind hyperparameters. Only the section for
/// the selected kind matters; the other is carried but unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub clstm: CLstmConfig,
    /// `seq_len` here is ignored: the transformer's sequence length always
    /// comes from `data.segment_length`.
    pub anomaly_transformer: AnomTransConfig,
}

/// Training knobs. Unset fields fall back to the selected model's defaults:
/// epochs 200/50, batch size 600/32, threshold 0.5/0.48, learning rate
/// 1e-3/1e-4 for the C-LSTM / transformer respectively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<u32>,
    pub batch_size: Option<usize>,
    pub threshold: Option<f64>,
    pub learning_rate: Option<f64>,
    pub seed: u64,
    /// Seeds for multi-run commands (`report`). Single-run commands use
    /// `seed`.
    pub seeds: Option<Vec<u64>>,
    /// Stop a run early once best validation F1 reaches this value.
    pub stop_at_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Directory all artifacts (cache, checkpoints, CSVs) land in.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs") }
    }
}

impl RunConfig {
    /// Read, parse, apply the `PUMPWATCH_SEED` override, and validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: RunConfig = toml::from_str(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse and validate a TOML document (no environment override).
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replace `train.seed` with the value of the override variable, when
    /// present.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(raw) = value {
            let seed: u64 = raw.parse().map_err(|_| {
                ConfigError::Invalid(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}"))
            })?;
            self.train.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));

        if self.data.segment_length == 0 {
            return invalid("segment_length must be ≥ 1".into());
        }
        if ChunkSize::from_secs(self.data.chunk_size).is_err() {
            return invalid(format!(
                "chunk_size must be one of 5, 15, 25; got {}",
                self.data.chunk_size
            ));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return invalid(format!(
                "train_fraction must be in (0, 1), got {}",
                self.data.train_fraction
            ));
        }
        if !(self.data.undersample > 0.0 && self.data.undersample <= 1.0) {
            return invalid(format!(
                "undersample must be in (0, 1], got {}",
                self.data.undersample
            ));
        }
        self.mask_indices()?;
        if let Some(synth) = &self.data.synth {
            synth.validate().map_err(|e| ConfigError::Invalid(format!("synth: {e}")))?;
        }

        match self.model.kind {
            ModelKind::CLstm => {
                let c = &self.model.clstm;
                c.validate().map_err(nn_invalid)?;
                if c.input_width != FEATURE_NAMES.len() {
                    return invalid(format!(
                        "model.clstm.input_width must equal the feature count {}, got {}",
                        FEATURE_NAMES.len(),
                        c.input_width
                    ));
                }
                if self.data.segment_length < c.min_seg_len() {
                    return invalid(format!(
                        "segment_length {} is shorter than the C-LSTM minimum {} \
                         (conv kernel {} + pool kernel {} − 1)",
                        self.data.segment_length,
                        c.min_seg_len(),
                        c.conv_k,
                        c.pool_k
                    ));
                }
            }
            ModelKind::AnomalyTransformer => {
                self.effective_transformer_config().validate().map_err(nn_invalid)?;
            }
        }

        let t = &self.train;
        if t.epochs == Some(0) {
            return invalid("train.epochs must be ≥ 1".into());
        }
        if t.batch_size == Some(0) {
            return invalid("train.batch_size must be ≥ 1".into());
        }
        if let Some(th) = t.threshold {
            if !th.is_finite() || !(0.0..=1.0).contains(&th) {
                return invalid(format!("train.threshold must be in [0, 1], got {th}"));
            }
        }
        if let Some(lr) = t.learning_rate {
            if !lr.is_finite() || lr <= 0.0 {
                return invalid(format!("train.learning_rate must be > 0, got {lr}"));
            }
        }
        if let Some(f1) = t.stop_at_f1 {
            if !f1.is_finite() || !(0.0..=1.0).contains(&f1) {
                return invalid(format!("train.stop_at_f1 must be in [0, 1], got {f1}"));
            }
        }
        if let Some(seeds) = &t.seeds {
            if seeds.is_empty() {
                return invalid("train.seeds must not be empty".into());
            }
        }
        Ok(())
    }

    /// Effective chunk width: the synthetic source's when present, otherwise
    /// `data.chunk_size`.
    pub fn chunk_size(&self) -> ChunkSize {
        match &self.data.synth {
            Some(s) => s.chunk_size,
            None => ChunkSize::from_secs(self.data.chunk_size)
                .expect("validate() admits only representable chunk sizes"),
        }
    }

    /// `data.mask_features` resolved to feature indices.
    pub fn mask_indices(&self) -> Result<Vec<usize>, ConfigError> {
        self.data
            .mask_features
            .iter()
            .map(|name| {
                FEATURE_NAMES.iter().position(|n| n == name).ok_or_else(|| {
                    ConfigError::Invalid(format!(
                        "mask_features: unknown feature {name:?}; valid names: {}",
                        FEATURE_NAMES.join(", ")
                    ))
                })
            })
            .collect()
    }

    /// Identity of the prepared dataset this config describes. Covers every
    /// field that changes the segment cache's content — and nothing else, so
    /// moving files around does not invalidate checkpoints.
    pub fn data_hash(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct DataIdentity<'a> {
            chunk_secs: u32,
            segment_length: usize,
            train_fraction: f64,
            min_pump_chunks: usize,
            undersample: f64,
            mask: Vec<usize>,
            normalize: bool,
            seed: u64,
            synth: Option<&'a SynthSpec>,
        }
        let identity = DataIdentity {
            chunk_secs: self.chunk_size().seconds(),
            segment_length: self.data.segment_length,
            train_fraction: self.data.train_fraction,
            min_pump_chunks: self.data.min_pump_chunks,
            undersample: self.data.undersample,
            mask: self.mask_indices().expect("validate() resolves mask names"),
            normalize: self.data.normalize,
            seed: self.data.seed,
            synth: self.data.synth.as_ref(),
        };
        let json = serde_json::to_vec(&identity).expect("config fields serialize to JSON");
        Sha256::digest(&json).into()
    }

    /// The dataset pipeline parameters this config implies.
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            seg_len: self.data.segment_length,
            train_fraction: self.data.train_fraction,
            min_pump_chunks: self.data.min_pump_chunks,
            undersample: self.data.undersample,
            mask: self.mask_indices().expect("validate() resolves mask names"),
            normalize: self.data.normalize,
            seed: self.data.seed,
            config_hash: self.data_hash(),
        }
    }

    /// The transformer hyperparameters actually used: the config section
    /// with `seq_len` pinned to `data.segment_length`.
    pub fn effective_transformer_config(&self) -> AnomTransConfig {
        AnomTransConfig {
            seq_len: self.data.segment_length,
            ..self.model.anomaly_transformer.clone()
        }
    }

    /// Build and initialize the configured detector.
    pub fn build_model(&self, seed: u64) -> Result<Model, NnError> {
        match self.model.kind {
            ModelKind::CLstm => Ok(Model::CLstm(CLstm::init(&self.model.clstm, seed)?)),
            ModelKind::AnomalyTransformer => Ok(Model::AnomalyTransformer(
                AnomalyTransformer::init(&self.effective_transformer_config(), seed)?,
            )),
        }
    }

    /// Resolve the training section against the selected model's defaults.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let kind = self.model.kind;
        TrainConfig {
            epochs: self.train.epochs.unwrap_or_else(|| kind.default_epochs()),
            batch_size: self.train.batch_size.unwrap_or_else(|| kind.default_batch_size()),
            threshold: self.train.threshold.unwrap_or_else(|| kind.default_threshold()),
            learning_rate: self.train.learning_rate.unwrap_or_else(|| kind.default_lr()),
            seed,
            stop_at_f1: self.train.stop_at_f1,
        }
    }

    /// Seeds for multi-run commands: `train.seeds` when set, else the single
    /// `train.seed`.
    pub fn seeds(&self) -> Vec<u64> {
        match &self.train.seeds {
            Some(s) => s.clone(),
            None => vec![self.train.seed],
        }
    }

    /// Where the prepared dataset cache lives.
    pub fn cache_path(&self) -> PathBuf {
        match &self.data.cache {
            Some(p) => p.clone(),
            None => self.output.dir.join("dataset.pwds"),
        }
    }
}

fn nn_invalid(e: NnError) -> ConfigError {
    ConfigError::Invalid(format!("model.{e}"))
}
