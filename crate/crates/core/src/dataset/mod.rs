//! From a chunk-feature series to model-ready segments.
//!
//! The pipeline, in order:
//!
//! 1. [`split_train_val`]: cut the series at `train_fraction` without
//!    shuffling — validation is strictly the later part of the data.
//! 2. [`InputTransform::fit`]: feature masking plus per-feature
//!    standardization, with statistics taken from the train rows only.
//! 3. [`group_and_filter`]: group rows by pump; on the train side, drop pumps
//!    shorter than `min_pump_chunks`.
//! 4. [`segment_all`]: per pump, one sliding window per chunk, left edge
//!    reflection-padded so early chunks still yield full-length segments.
//! 5. [`undersample`]: keep every segment whose window touches a positive
//!    chunk, plus a seeded uniform sample of the negatives. Train only.
//! 6. [`batch`]: seeded shuffle and fixed-size batching.
//!
//! [`synthesize`] produces labeled fixture series for tests and demos, and
//! [`PreparedDataset`] caches the pipeline output on disk.

mod cache;
mod segment;
mod synth;
mod transform;

pub use cache::PreparedDataset;
pub use segment::{reflect_index, segment_all, segment_pump, Segment};
pub use synth::{synthesize, SynthSpec};
pub use transform::InputTransform;

use rand::Rng;

use crate::ingest::{ChunkFeatures, ChunkSeries, IngestError};
use crate::seed::substream;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("train fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),

    #[error("shuffled splits are not supported; the validation set must follow the train set in time")]
    ShuffledSplit,

    #[error("segment length must be ≥ 1, got {0}")]
    InvalidSegmentLength(usize),

    #[error("undersample fraction must be in (0, 1], got {0}")]
    InvalidUndersample(f64),

    #[error("batch size must be ≥ 1")]
    InvalidBatchSize,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Ingest(#[from] IngestError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad dataset cache: {0}")]
    BadCache(String),
}

/// How to divide a series into train and validation rows.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    /// Must stay `false`: shuffling would leak future chunks into training.
    pub shuffled: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.8, shuffled: false }
    }
}

/// Split at `floor(train_fraction · n)` rows, preserving order.
pub fn split_train_val(
    series: &ChunkSeries,
    spec: &SplitSpec,
) -> Result<(ChunkSeries, ChunkSeries), DatasetError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(spec.train_fraction));
    }
    if spec.shuffled {
        return Err(DatasetError::ShuffledSplit);
    }
    let n = series.len();
    let k = (spec.train_fraction * n as f64).floor() as usize;
    if k == 0 {
        log::warn!("train split is empty ({n} rows at fraction {})", spec.train_fraction);
    }
    if k == n {
        log::warn!("validation split is empty ({n} rows at fraction {})", spec.train_fraction);
    }
    let train = ChunkSeries::new(series.chunk_size(), series.rows()[..k].to_vec())?;
    let val = ChunkSeries::new(series.chunk_size(), series.rows()[k..].to_vec())?;
    Ok((train, val))
}

/// One pump's contiguous rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PumpSeries {
    pub pump_index: i64,
    pub rows: Vec<ChunkFeatures>,
}

/// Group rows into per-pump runs; with `apply_min_filter`, drop runs shorter
/// than `min_chunks` (train-side hygiene — never applied to validation).
pub fn group_and_filter(
    series: &ChunkSeries,
    min_chunks: usize,
    apply_min_filter: bool,
) -> Vec<PumpSeries> {
    let mut pumps: Vec<PumpSeries> = Vec::new();
    for row in series.rows() {
        match pumps.last_mut() {
            Some(p) if p.pump_index == row.pump_index => p.rows.push(row.clone()),
            _ => pumps.push(PumpSeries { pump_index: row.pump_index, rows: vec![row.clone()] }),
        }
    }
    if apply_min_filter {
        let before = pumps.len();
        pumps.retain(|p| p.rows.len() >= min_chunks);
        if pumps.len() < before {
            log::info!(
                "dropped {} pump(s) shorter than {min_chunks} chunks",
                before - pumps.len()
            );
        }
    }
    pumps
}

/// Keep all positive-window segments and a uniform sample of
/// `round(fraction · n_negative)` negatives, preserving input order.
pub fn undersample(
    segments: &[Segment],
    fraction: f64,
    seed: u64,
) -> Result<Vec<Segment>, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidUndersample(fraction));
    }
    let negatives: Vec<usize> = segments
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.contains_positive)
        .map(|(i, _)| i)
        .collect();
    let keep_n = (fraction * negatives.len() as f64).round() as usize;

    // Partial Fisher–Yates: the first keep_n slots are a uniform sample
    // without replacement.
    let mut rng = substream(seed, "undersample");
    let mut pool = negatives;
    for i in 0..keep_n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut selected = pool[..keep_n].to_vec();
    selected.sort_unstable();

    let mut sel_iter = selected.iter().peekable();
    let mut out = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if seg.contains_positive {
            out.push(seg.clone());
        } else if sel_iter.peek() == Some(&&i) {
            sel_iter.next();
            out.push(seg.clone());
        }
    }
    Ok(out)
}

/// Seeded shuffle, then fixed-size batches (the last may be short).
pub fn batch(
    segments: &[Segment],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<Segment>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::InvalidBatchSize);
    }
    let mut idx: Vec<usize> = (0..segments.len()).collect();
    let mut rng = substream(seed, "batch");
    // Fisher–Yates.
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    Ok(idx
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| segments[i].clone()).collect())
        .collect())
}

/// Everything [`prepare`] needs beyond the input series.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub seg_len: usize,
    pub train_fraction: f64,
    pub min_pump_chunks: usize,
    pub undersample: f64,
    /// Feature indices zeroed before standardization.
    pub mask: Vec<usize>,
    pub normalize: bool,
    pub seed: u64,
    /// Hash of the run configuration, stamped into the prepared cache.
    pub config_hash: [u8; 32],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seg_len: 15,
            train_fraction: 0.8,
            min_pump_chunks: 100,
            undersample: 0.05,
            mask: vec![crate::ingest::FEATURE_NAMES.iter().position(|n| *n == "PumpIndex").unwrap()],
            normalize: true,
            seed: 0,
            config_hash: [0; 32],
        }
    }
}

/// Run the whole pipeline on a feature series.
pub fn prepare(series: &ChunkSeries, cfg: &PipelineConfig) -> Result<PreparedDataset, DatasetError> {
    if cfg.seg_len == 0 {
        return Err(DatasetError::InvalidSegmentLength(0));
    }
    let spec = SplitSpec { train_fraction: cfg.train_fraction, shuffled: false };
    let (train_rows, val_rows) = split_train_val(series, &spec)?;

    let transform = InputTransform::fit(train_rows.rows(), &cfg.mask, cfg.normalize);

    let train_pumps = group_and_filter(&train_rows, cfg.min_pump_chunks, true);
    let train_full = segment_all(&train_pumps, cfg.seg_len)?;
    let train = undersample(&train_full, cfg.undersample, cfg.seed)?;

    // Validation is never filtered or undersampled: it must reflect the
    // deployment distribution.
    let val_pumps = group_and_filter(&val_rows, cfg.min_pump_chunks, false);
    let val = segment_all(&val_pumps, cfg.seg_len)?;

    Ok(PreparedDataset {
        config_hash: cfg.config_hash,
        chunk_size: series.chunk_size(),
        seg_len: cfg.seg_len,
        transform,
        train,
        val,
    })
}
