//! Training loops, thresholded binary metrics, and multi-seed reporting.
//!
//! [`train`] runs a full epoch loop over pre-segmented data: seeded batch
//! shuffling each epoch, one optimizer step per batch, and a complete
//! validation pass at the end of every epoch. The best epoch is the one with
//! the highest validation F1, earliest epoch on ties, and its parameter
//! snapshot is returned alongside the per-epoch history.
//!
//! [`compute_metrics`] implements the thresholded precision/recall/F1
//! conventions used everywhere in the crate, [`confidence_interval`] the
//! Student-t interval used to aggregate multi-seed runs, and [`report`] the
//! text table + CSV emission against [`REFERENCE_TABLE`].

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{self, DatasetError, InputTransform, Segment};
use crate::ingest::ChunkSize;
use crate::models::{Model, ModelKind};
use crate::nn::{Adam, AdamConfig, NnError, ParamSet};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("probs and labels differ in length: {probs} vs {labels}")]
    LengthMismatch { probs: usize, labels: usize },

    #[error("label at index {index} is {value}; labels must be exactly 0 or 1")]
    InvalidLabel { index: usize, value: f64 },

    #[error("{0} split is empty")]
    EmptySplit(&'static str),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u32, batch: usize },

    #[error("confidence intervals need at least two runs, got {0}")]
    TooFewRuns(usize),

    #[error("invalid training spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Confusion-matrix counts at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

/// Thresholded binary metrics. All three scores are fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Score `probs` against `labels` at `threshold`.
///
/// A prediction is positive iff `prob >= threshold`. Zero denominators
/// resolve downwards: no predicted positives → precision 0, no actual
/// positives → recall 0, both zero → F1 0. This never inflates a score.
pub fn compute_metrics(
    probs: &[f64],
    labels: &[f64],
    threshold: f64,
) -> Result<Metrics, TrainError> {
    if probs.len() != labels.len() {
        return Err(TrainError::LengthMismatch { probs: probs.len(), labels: labels.len() });
    }
    let mut counts = Counts::default();
    for (i, (&p, &l)) in probs.iter().zip(labels).enumerate() {
        let positive = l == 1.0;
        if !positive && l != 0.0 {
            return Err(TrainError::InvalidLabel { index: i, value: l });
        }
        match (p >= threshold, positive) {
            (true, true) => counts.true_positives += 1,
            (true, false) => counts.false_positives += 1,
            (false, true) => counts.false_negatives += 1,
            (false, false) => counts.true_negatives += 1,
        }
    }
    let precision = ratio(counts.true_positives, counts.true_positives + counts.false_positives);
    let recall = ratio(counts.true_positives, counts.true_positives + counts.false_negatives);
    Ok(Metrics { precision, recall, f1: f1_from(precision, recall), counts })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Validation metrics for one epoch, numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Segment-weighted mean of the per-batch training losses.
    pub train_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
}

/// One complete training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    /// The history entry with the highest validation F1 (earliest on ties).
    pub best: EpochRecord,
    pub history: Vec<EpochRecord>,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub threshold: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop early once the best validation F1 reaches this value. `None`
    /// runs the full epoch budget, in which case the history length always
    /// equals `epochs`.
    pub stop_at_f1: Option<f64>,
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidSpec("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidSpec("batch_size must be ≥ 1".into()));
        }
        if !self.threshold.is_finite() || !(0.0..=1.0).contains(&self.threshold) {
            return Err(TrainError::InvalidSpec(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidSpec(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(f1) = self.stop_at_f1 {
            if !f1.is_finite() || !(0.0..=1.0).contains(&f1) {
                return Err(TrainError::InvalidSpec(format!(
                    "stop_at_f1 must be in [0, 1], got {f1}"
                )));
            }
        }
        Ok(())
    }
}

/// A finished run plus the parameter snapshot from its best epoch.
///
/// The model passed to [`train`] is left at its *last*-epoch state; callers
/// that want the best epoch (checkpointing, evaluation) use `best_params`.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub run: RunResult,
    pub best_params: ParamSet,
}

/// Run the epoch loop.
///
/// Each epoch reshuffles the train segments with a fresh substream
/// (`shuffle/{epoch}` of the run seed), steps the optimizer once per batch,
/// then scores the untouched validation segments at `cfg.threshold`. The
/// whole run is deterministic given the seed and inputs.
pub fn train(
    model: &mut Model,
    train_segments: &[Segment],
    val_segments: &[Segment],
    transform: &InputTransform,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if train_segments.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_segments.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }

    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs as usize);
    let mut best_idx = 0usize;
    let mut best_params = model.params().clone();

    for epoch in 1..=cfg.epochs {
        let shuffle_seed = seed::substream_u64(cfg.seed, &format!("shuffle/{epoch}"));
        let batches = dataset::batch(train_segments, cfg.batch_size, shuffle_seed)?;

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let refs: Vec<&Segment> = batch.iter().collect();
            let (x, labels) = transform.batch_tensor(&refs)?;
            let loss = model.train_batch(&x, &labels, &mut opt)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_segments.len() as f64;

        let metrics = evaluate(model, val_segments, transform, cfg.threshold, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_precision: metrics.precision,
            val_recall: metrics.recall,
            val_f1: metrics.f1,
        });

        let last = history.len() - 1;
        if last == 0 || history[last].val_f1 > history[best_idx].val_f1 {
            best_idx = last;
            best_params = model.params().clone();
        }
        if log::log_enabled!(log::Level::Info) {
            let r = &history[last];
            log::info!(
                "epoch {:>3}: loss {:.6}  val P {:.4} R {:.4} F1 {:.4}",
                r.epoch,
                r.train_loss,
                r.val_precision,
                r.val_recall,
                r.val_f1
            );
        }
        if let Some(target) = cfg.stop_at_f1 {
            if history[best_idx].val_f1 >= target {
                log::info!("early stop: best F1 {:.4} ≥ {target}", history[best_idx].val_f1);
                break;
            }
        }
    }

    let run = RunResult {
        seed: cfg.seed,
        best: history[best_idx].clone(),
        history,
        threshold: cfg.threshold,
    };
    Ok(TrainOutput { run, best_params })
}

/// Score `model` on `segments` at `threshold`, batching inference by
/// `batch_size` to bound peak memory. Batching never changes the numbers:
/// every kernel accumulates identically for any batch split.
pub fn evaluate(
    model: &Model,
    segments: &[Segment],
    transform: &InputTransform,
    threshold: f64,
    batch_size: usize,
) -> Result<Metrics, TrainError> {
    let (probs, labels) = predict_all(model, segments, transform, batch_size)?;
    compute_metrics(&probs, &labels, threshold)
}

/// Model probabilities and labels for `segments`, in order.
pub fn predict_all(
    model: &Model,
    segments: &[Segment],
    transform: &InputTransform,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    if batch_size == 0 {
        return Err(TrainError::InvalidSpec("batch_size must be ≥ 1".into()));
    }
    if segments.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut probs = Vec::with_capacity(segments.len());
    let mut labels = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(batch_size) {
        let refs: Vec<&Segment> = chunk.iter().collect();
        let (x, l) = transform.batch_tensor(&refs)?;
        probs.extend(model.predict(&x)?);
        labels.extend(l);
    }
    Ok((probs, labels))
}

/// Train once per seed, rebuilding the model each time.
///
/// Seeds drive model initialization and epoch shuffling; the prepared
/// dataset (and thus its undersampling draw) is shared across runs so the
/// seeds measure model variance, not data variance.
pub fn run_seeds<F>(
    seeds: &[u64],
    base: &TrainConfig,
    train_segments: &[Segment],
    val_segments: &[Segment],
    transform: &InputTransform,
    mut make_model: F,
) -> Result<Vec<RunResult>, TrainError>
where
    F: FnMut(u64) -> Result<Model, TrainError>,
{
    if seeds.is_empty() {
        return Err(TrainError::InvalidSpec("at least one seed is required".into()));
    }
    let mut results = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut model = make_model(s)?;
        let cfg = TrainConfig { seed: s, ..base.clone() };
        let output = train(&mut model, train_segments, val_segments, transform, &cfg)?;
        results.push(output.run);
    }
    Ok(results)
}

/// `mean ± t_{n−1, (1+level)/2} · sd / √n` over `values`.
///
/// Returns `(mean, half_width)`. Zero-variance samples short-circuit to a
/// zero-width interval.
pub fn confidence_interval(values: &[f64], level: f64) -> Result<(f64, f64), TrainError> {
    let n = values.len();
    if n < 2 {
        return Err(TrainError::TooFewRuns(n));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(TrainError::InvalidSpec(format!(
            "confidence level must be in (0, 1), got {level}"
        )));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok((mean, 0.0));
    }
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| TrainError::InvalidSpec(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    Ok((mean, t * sd / nf.sqrt()))
}

/// One row of [`REFERENCE_TABLE`]. Score fields are percentages as
/// originally reported; `ci` is the half-width of a 95% interval where one
/// was reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub chunk_secs: u32,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ci: Option<f64>,
}

/// Reference results on the public Binance pump-and-dump dataset, used as
/// the comparison column in [`report`]. The Kamps rows are statistical
/// baselines on hour-chunked data; RF is a seeded random-forest baseline.
pub const REFERENCE_TABLE: &[ReferenceRow] = &[
    ReferenceRow { model: "Kamps (Init.)", chunk_secs: 3600, precision: 15.6, recall: 96.7, f1: 26.8, ci: None },
    ReferenceRow { model: "Kamps (Bal.)", chunk_secs: 3600, precision: 38.4, recall: 93.5, f1: 54.4, ci: None },
    ReferenceRow { model: "Kamps (Strict)", chunk_secs: 3600, precision: 50.1, recall: 75.0, f1: 60.5, ci: None },
    ReferenceRow { model: "RF", chunk_secs: 5, precision: 97.7, recall: 71.6, f1: 82.6, ci: Some(0.0) },
    ReferenceRow { model: "RF", chunk_secs: 15, precision: 98.0, recall: 81.9, f1: 89.2, ci: Some(0.0) },
    ReferenceRow { model: "RF", chunk_secs: 25, precision: 94.5, recall: 83.8, f1: 88.8, ci: Some(0.0) },
    ReferenceRow { model: "C-LSTM", chunk_secs: 5, precision: 91.2, recall: 77.5, f1: 83.7, ci: Some(1.0) },
    ReferenceRow { model: "C-LSTM", chunk_secs: 15, precision: 94.2, recall: 84.9, f1: 89.3, ci: Some(0.4) },
    ReferenceRow { model: "C-LSTM", chunk_secs: 25, precision: 94.2, recall: 85.0, f1: 89.3, ci: Some(0.5) },
    ReferenceRow { model: "Anom. Trans.", chunk_secs: 5, precision: 91.0, recall: 87.7, f1: 89.3, ci: Some(0.4) },
    ReferenceRow { model: "Anom. Trans.", chunk_secs: 15, precision: 93.0, recall: 94.2, f1: 93.6, ci: Some(0.8) },
    ReferenceRow { model: "Anom. Trans.", chunk_secs: 25, precision: 88.4, recall: 90.0, f1: 89.2, ci: Some(0.3) },
];

/// Display label a [`ModelKind`] carries in the reference table.
pub fn reference_label(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::CLstm => "C-LSTM",
        ModelKind::AnomalyTransformer => "Anom. Trans.",
    }
}

/// The reference row for `kind` at `chunk_size`, if the table has one.
pub fn reference_row(kind: ModelKind, chunk_size: ChunkSize) -> Option<&'static ReferenceRow> {
    let label = reference_label(kind);
    let secs = chunk_size.seconds();
    REFERENCE_TABLE.iter().find(|r| r.model == label && r.chunk_secs == secs)
}

fn chunk_label(secs: u32) -> String {
    if secs == 3600 {
        "1 Hour".to_string()
    } else {
        format!("{secs} Secs")
    }
}

/// A rendered multi-seed report: a human-readable comparison table plus two
/// machine-readable CSVs.
#[derive(Debug, Clone)]
pub struct Report {
    /// Text table mirroring the reference layout, with this run's aggregate
    /// row inserted after its reference row.
    pub text: String,
    /// One row per run: `model,chunk_size,seed,epoch,precision,recall,f1,threshold`.
    pub results_csv: String,
    /// Plot-ready per-epoch curves:
    /// `model,chunk_size,seed,epoch,train_loss,precision,recall,f1`.
    pub curves_csv: String,
}

/// Results CSV for `results`, one best-epoch row per run.
pub fn results_csv(kind: ModelKind, chunk_size: ChunkSize, results: &[RunResult]) -> String {
    let mut out = String::from("model,chunk_size,seed,epoch,precision,recall,f1,threshold\n");
    for run in results {
        let b = &run.best;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            kind.as_str(),
            chunk_size.seconds(),
            run.seed,
            b.epoch,
            b.val_precision,
            b.val_recall,
            b.val_f1,
            run.threshold
        );
    }
    out
}

/// Per-epoch curves CSV for `results`, one row per epoch per run.
pub fn curves_csv(kind: ModelKind, chunk_size: ChunkSize, results: &[RunResult]) -> String {
    let mut out = String::from("model,chunk_size,seed,epoch,train_loss,precision,recall,f1\n");
    for run in results {
        for r in &run.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                kind.as_str(),
                chunk_size.seconds(),
                run.seed,
                r.epoch,
                r.train_loss,
                r.val_precision,
                r.val_recall,
                r.val_f1
            );
        }
    }
    out
}

/// Aggregate `results` and render them against `reference`.
///
/// The run's row shows mean precision/recall over best epochs and mean F1 ±
/// the 95% Student-t half-width (zero for a single run). It is placed
/// immediately after the matching reference row, or appended when the table
/// has no matching row.
pub fn report(
    kind: ModelKind,
    chunk_size: ChunkSize,
    results: &[RunResult],
    reference: &[ReferenceRow],
) -> Result<Report, TrainError> {
    if results.is_empty() {
        return Err(TrainError::InvalidSpec("report needs at least one run".into()));
    }
    let n = results.len();
    let mean = |f: &dyn Fn(&RunResult) -> f64| results.iter().map(f).sum::<f64>() / n as f64;
    let mean_p = mean(&|r| r.best.val_precision);
    let mean_r = mean(&|r| r.best.val_recall);
    let f1s: Vec<f64> = results.iter().map(|r| r.best.val_f1).collect();
    let (mean_f1, half) =
        if n >= 2 { confidence_interval(&f1s, 0.95)? } else { (f1s[0], 0.0) };

    let ours_label = format!("{} (ours)", reference_label(kind));
    let ours = [
        ours_label.clone(),
        chunk_label(chunk_size.seconds()),
        format!("{:.1}%", 100.0 * mean_p),
        format!("{:.1}%", 100.0 * mean_r),
        format!("{:.1} ± {:.1}%", 100.0 * mean_f1, 100.0 * half),
    ];

    let mut rows: Vec<[String; 5]> = Vec::with_capacity(reference.len() + 2);
    rows.push([
        "Model".into(),
        "Chunk Size".into(),
        "Precision".into(),
        "Recall".into(),
        "F1".into(),
    ]);
    let matches = |r: &ReferenceRow| {
        r.model == reference_label(kind) && r.chunk_secs == chunk_size.seconds()
    };
    let mut inserted = false;
    for r in reference {
        let f1 = match r.ci {
            Some(ci) => format!("{:.1} ± {:.1}%", r.f1, ci),
            None => format!("{:.1}%", r.f1),
        };
        rows.push([
            r.model.to_string(),
            chunk_label(r.chunk_secs),
            format!("{:.1}%", r.precision),
            format!("{:.1}%", r.recall),
            f1,
        ]);
        if matches(r) {
            rows.push(ours.clone());
            inserted = true;
        }
    }
    if !inserted {
        rows.push(ours);
    }

    let mut widths = [0usize; 5];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut text = String::new();
    for (i, row) in rows.iter().enumerate() {
        let mut line = String::new();
        for (j, cell) in row.iter().enumerate() {
            let _ = write!(line, "{:<width$}", cell, width = widths[j] + 2);
        }
        text.push_str(line.trim_end());
        text.push('\n');
        if i == 0 {
            let total: usize = widths.iter().map(|w| w + 2).sum::<usize>() - 2;
            text.push_str(&"-".repeat(total));
            text.push('\n');
        }
    }
    let _ = writeln!(
        text,
        "\nn = {n} run{}; F1 shown as mean ± half-width of a 95% Student-t interval \
         (t_(n-1,0.975) · sd / sqrt(n)).",
        if n == 1 { "" } else { "s" }
    );
    text.push_str("Reference rows quote results on the public Binance pump-and-dump dataset.\n");

    Ok(Report {
        text,
        results_csv: results_csv(kind, chunk_size, results),
        curves_csv: curves_csv(kind, chunk_size, results),
    })
}
