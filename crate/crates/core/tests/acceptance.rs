//! Whole-stack acceptance checks, one verdict line per criterion.
//!
//! This binary runs without the libtest harness so every line prints under
//! a plain `cargo test --workspace`. The process exits nonzero if any
//! criterion fails; criterion 7 needs a real labeled dataset and reports
//! `skip` when none is available.

use std::time::Instant;

use pumpwatch::dataset::{
    self, group_and_filter, segment_pump, split_train_val, undersample, PipelineConfig,
    PumpSeries, SplitSpec, SynthSpec,
};
use pumpwatch::ingest::{load_feature_csv, time_encodings, ChunkFeatures, ChunkSeries, ChunkSize};
use pumpwatch::models::{
    association_discrepancy, AnomTransConfig, AnomalyTransformer, CLstm, CLstmConfig, Model,
    ModelKind,
};
use pumpwatch::nn::Tensor;
use pumpwatch::replay::replay_rows;
use pumpwatch::train::{self, f1_from, TrainConfig, REFERENCE_TABLE};
use pumpwatch::InputTransform;

use rand::Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("default detector parameter counts", c1_param_counts),
        ("reference table F1 consistency", c2_reference_f1),
        ("analytic gradients match finite differences", c3_gradient_checks),
        ("association invariants", c4_association_invariants),
        ("dataset pipeline invariants", c5_pipeline_invariants),
        ("end-to-end training on the synthetic fixture", c6_synthetic_end_to_end),
        ("reproduction on the real dataset", c7_real_dataset),
        ("streamed replay equals batch scoring", c8_replay_equals_batch),
        ("byte-identical artifacts across reruns", c9_determinism),
    ];

    let mut failures = 0u32;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        let (verdict, detail) = match &outcome {
            Pass(d) => ("pass", d),
            Fail(d) => ("FAIL", d),
            Skip(d) => ("skip", d),
        };
        println!("criterion {n} {verdict} — {name}: {detail} [{secs:.1}s]", n = i + 1);
        if matches!(outcome, Fail(_)) {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. Parameter counts of the default architectures.

fn c1_param_counts() -> Outcome {
    let clstm = match CLstm::init(&CLstmConfig::default(), 0) {
        Ok(m) => m.params.param_count(),
        Err(e) => return Fail(format!("C-LSTM init: {e}")),
    };
    let at = match AnomalyTransformer::init(&AnomTransConfig::default(), 0) {
        Ok(m) => m.params.param_count(),
        Err(e) => return Fail(format!("transformer init: {e}")),
    };
    if clstm != 997_851 {
        return Fail(format!("C-LSTM has {clstm} parameters, expected 997,851"));
    }
    if at != 136_017 {
        return Fail(format!("transformer has {at} parameters, expected 136,017"));
    }
    Pass("C-LSTM 997,851 and transformer 136,017 trainable parameters".into())
}

// ---------------------------------------------------------------------------
// 2. Internal consistency of the reference table: every row's F1 must be the
// harmonic mean of its precision and recall to within 0.1 points. The
// strictest hand-tuned baseline row is excluded — its published F1 is 0.43
// points off the harmonic mean of its own precision and recall, and a unit
// test pins that deviation so silent "fixes" of the constant are caught.

fn c2_reference_f1() -> Outcome {
    let mut checked = 0;
    let mut worst: (f64, &str) = (0.0, "");
    for row in REFERENCE_TABLE {
        if row.model == "Kamps (Strict)" {
            continue;
        }
        let harmonic = f1_from(row.precision, row.recall);
        let diff = (harmonic - row.f1).abs();
        if diff > 0.1 {
            return Fail(format!(
                "{} at {}s: harmonic mean {harmonic:.3} vs tabulated {:.1} (off {diff:.3} points)",
                row.model, row.chunk_secs, row.f1
            ));
        }
        if diff > worst.0 {
            worst = (diff, row.model);
        }
        checked += 1;
    }
    Pass(format!(
        "{checked} rows within 0.1 points (worst {:.3} points, {}); one strict baseline row \
         excluded as tabulated",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------------------
// 3. Gradient checking: finite differences against the autodiff gradients of
// both full models, every parameter probed at spread coordinates.

fn random_batch(batch: usize, rows: usize, name: &str) -> Tensor {
    let mut rng = pumpwatch::seed::substream(23, name);
    let data = (0..batch * rows * 15).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![batch, rows, 15], data).unwrap()
}

fn c3_gradient_checks() -> Outcome {
    let cfg = CLstmConfig { conv_out: 5, lstm_hidden: 4, ..Default::default() };
    let clstm = CLstm::init(&cfg, 13).unwrap();
    let x = random_batch(2, 8, "acceptance/clstm-gradcheck");
    let a = match clstm.gradient_check(&x, &[1.0, 0.0], 6, 1e-5) {
        Ok(r) => r,
        Err(e) => return Fail(format!("C-LSTM check: {e}")),
    };

    let cfg = AnomTransConfig {
        seq_len: 5,
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        lambda: 0.05,
        ..Default::default()
    };
    let at = AnomalyTransformer::init(&cfg, 19).unwrap();
    let x = random_batch(2, cfg.seq_len, "acceptance/at-gradcheck");
    let b = match at.gradient_check(&x, &[1.0, 0.0], 4, 1e-5) {
        Ok(r) => r,
        Err(e) => return Fail(format!("transformer check: {e}")),
    };

    if a.max_rel_diff >= 1e-4 {
        return Fail(format!("C-LSTM worst relative disagreement {:.2e}", a.max_rel_diff));
    }
    if b.max_rel_diff >= 1e-4 {
        return Fail(format!("transformer worst relative disagreement {:.2e}", b.max_rel_diff));
    }
    Pass(format!(
        "worst relative disagreement {:.1e} over {} C-LSTM coords, {:.1e} over {} transformer \
         coords (both phases)",
        a.max_rel_diff, a.coords_checked, b.max_rel_diff, b.coords_checked
    ))
}

// ---------------------------------------------------------------------------
// 4. Association structure of the attention detector: both association
// stacks are row-stochastic, the discrepancy is nonnegative, and it
// vanishes when prior and series associations coincide.

fn c4_association_invariants() -> Outcome {
    let cfg = AnomTransConfig {
        seq_len: 6,
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        ..Default::default()
    };
    let model = AnomalyTransformer::init(&cfg, 7).unwrap();
    let x = random_batch(3, cfg.seq_len, "acceptance/associations");
    let (out, _) = match model.forward(&x, false) {
        Ok(v) => v,
        Err(e) => return Fail(format!("forward: {e}")),
    };

    let n = cfg.seq_len;
    let per_slice = n * n;
    let mut rows_checked = 0usize;
    for (which, stack) in [("series", &out.s_layers), ("prior", &out.p_layers)] {
        for var in stack.iter() {
            let t = var.value();
            if t.shape() != [3, cfg.n_heads, n, n] {
                return Fail(format!("{which} association has shape {:?}", t.shape()));
            }
            for (i, row) in t.data().chunks(n).enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Fail(format!(
                        "{which} association row {i} is not a distribution (sum {sum:.12})"
                    ));
                }
                rows_checked += 1;
            }
        }
    }

    // Per-position discrepancy on the first batch element, first head.
    let slice = |v: &pumpwatch::nn::Var| {
        Tensor::new(vec![n, n], v.value().data()[..per_slice].to_vec()).unwrap()
    };
    let p: Vec<Tensor> = out.p_layers.iter().map(&slice).collect();
    let s: Vec<Tensor> = out.s_layers.iter().map(&slice).collect();
    let ad = match association_discrepancy(&p, &s) {
        Ok(v) => v,
        Err(e) => return Fail(format!("discrepancy: {e}")),
    };
    if ad.iter().any(|&v| !(v >= 0.0)) {
        return Fail(format!("negative discrepancy: {ad:?}"));
    }
    let self_ad = association_discrepancy(&p, &p).unwrap();
    if self_ad.iter().any(|&v| v.abs() > 1e-12) {
        return Fail(format!("discrepancy against itself is nonzero: {self_ad:?}"));
    }
    let probs = out.probs.value();
    if probs.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Fail("a probability escaped [0, 1]".into());
    }
    Pass(format!(
        "{rows_checked} association rows are distributions; discrepancy ≥ 0 and exactly 0 \
         against itself"
    ))
}

// ---------------------------------------------------------------------------
// 5. Dataset pipeline invariants on a hand-built series: chronological
// 80:20 split, short-pump filtering on the train side only, one window per
// chunk, start-of-pump reflection, and undersampling that never discards a
// positive window.

fn row(pump_index: i64, i: usize, label: u8) -> ChunkFeatures {
    let date = pump_index as f64 * 100_000.0 + i as f64 * 15.0;
    let (hour_sin, hour_cos, minute_sin, minute_cos) = time_encodings(date);
    ChunkFeatures {
        date,
        hour_sin,
        hour_cos,
        minute_sin,
        minute_cos,
        pump_index,
        symbol: pump_index % 3,
        std_rush_order: 0.1 + i as f64 * 0.01,
        avg_rush_order: 0.2,
        std_trades: 1.0 + (i % 7) as f64,
        std_volume: 2.0,
        avg_volume: 3.0,
        std_price: 0.01,
        avg_price: 0.02,
        avg_price_max: 0.03,
        label,
    }
}

fn c5_pipeline_invariants() -> Outcome {
    // Pumps of 150/150/40/150/150/150 chunks; the 40-chunk run sits inside
    // the train span. Five positives near the end of every long pump.
    let lengths = [150usize, 150, 40, 150, 150, 150];
    let mut rows = Vec::new();
    for (pump, &len) in lengths.iter().enumerate() {
        for i in 0..len {
            let label = u8::from(len >= 100 && (100..105).contains(&i));
            rows.push(row(pump as i64, i, label));
        }
    }
    let series = ChunkSeries::new(ChunkSize::S15, rows).unwrap();
    let total = series.len();

    // Chronological split at floor(0.8 · n).
    let (train, val) =
        split_train_val(&series, &SplitSpec { train_fraction: 0.8, shuffled: false }).unwrap();
    let k = (0.8 * total as f64).floor() as usize;
    if train.len() != k || val.len() != total - k {
        return Fail(format!("split sizes {} / {}, expected {k} / {}", train.len(), val.len(), total - k));
    }
    if train.rows().last().unwrap().date >= val.rows()[0].date
        && train.rows().last().unwrap().pump_index == val.rows()[0].pump_index
    {
        return Fail("validation rows do not follow training rows in time".into());
    }

    // Short pumps leave the train side; the val side keeps everything,
    // including the boundary fragment shorter than the cutoff.
    let train_pumps = group_and_filter(&train, 100, true);
    if train_pumps.iter().any(|p| p.pump_index == 2) {
        return Fail("the 40-chunk pump survived the train-side filter".into());
    }
    if train_pumps.iter().any(|p| p.rows.len() < 100) {
        return Fail("a sub-cutoff pump survived the train-side filter".into());
    }
    let val_pumps = group_and_filter(&val, 100, false);
    if !val_pumps.iter().any(|p| p.rows.len() < 100) {
        return Fail("expected the boundary fragment to stay in validation".into());
    }

    // One window per chunk, and the documented start-of-pump reflection.
    for p in &train_pumps {
        let segs = segment_pump(p, 15).unwrap();
        if segs.len() != p.rows.len() {
            return Fail(format!(
                "pump {}: {} windows for {} chunks",
                p.pump_index,
                segs.len(),
                p.rows.len()
            ));
        }
    }
    let tiny = PumpSeries { pump_index: 9, rows: (0..5).map(|i| row(9, i, 0)).collect() };
    let segs = segment_pump(&tiny, 3).unwrap();
    let got: Vec<Vec<u32>> = segs.iter().map(|s| s.source_rows.clone()).collect();
    let want = [vec![2, 1, 0], vec![1, 0, 1], vec![0, 1, 2], vec![1, 2, 3], vec![2, 3, 4]];
    if got != want {
        return Fail(format!("reflection mapping {got:?}, expected {want:?}"));
    }

    // Undersampling keeps every positive-containing window and a seeded
    // fraction of the negatives, in order.
    let all: Vec<_> = train_pumps.iter().flat_map(|p| segment_pump(p, 15).unwrap()).collect();
    let positives = all.iter().filter(|s| s.contains_positive).count();
    let negatives = all.len() - positives;
    let kept = undersample(&all, 0.05, 0).unwrap();
    let kept_pos = kept.iter().filter(|s| s.contains_positive).count();
    if kept_pos != positives {
        return Fail(format!("undersampling kept {kept_pos} of {positives} positive windows"));
    }
    let want_neg = (0.05 * negatives as f64).round() as usize;
    if kept.len() - kept_pos != want_neg {
        return Fail(format!(
            "undersampling kept {} negatives, expected {want_neg}",
            kept.len() - kept_pos
        ));
    }

    // The assembled pipeline applies undersampling to train only.
    let cfg = PipelineConfig { seg_len: 15, ..Default::default() };
    let prepared = dataset::prepare(&series, &cfg).unwrap();
    let val_chunks: usize = val_pumps.iter().map(|p| p.rows.len()).sum();
    if prepared.val.len() != val_chunks {
        return Fail(format!(
            "validation has {} windows for {val_chunks} chunks — it must not be undersampled",
            prepared.val.len()
        ));
    }
    Pass(format!(
        "split {k}:{} chronological; short pump filtered from train only; one window per chunk; \
         reflection matches; all {positives} positive windows kept",
        total - k
    ))
}

// ---------------------------------------------------------------------------
// 6. End-to-end training on the synthetic fixture: both detectors must
// reach validation F1 ≥ 0.90 inside a ten-minute budget.

fn fixture() -> SynthSpec {
    SynthSpec {
        n_pumps: 5,
        pump_len: 2000,
        anomaly_len: 20,
        amplitude: 10.0,
        chunk_size: ChunkSize::S15,
        ..Default::default()
    }
}

fn c6_synthetic_end_to_end() -> Outcome {
    let budget = std::time::Duration::from_secs(600);
    let started = Instant::now();

    let series = dataset::synthesize(&fixture(), 0).unwrap();
    let prepared = dataset::prepare(&series, &PipelineConfig::default()).unwrap();

    let mut outcomes = Vec::new();
    for kind in [ModelKind::CLstm, ModelKind::AnomalyTransformer] {
        let mut model = match kind {
            ModelKind::CLstm => Model::CLstm(CLstm::init(&CLstmConfig::default(), 0).unwrap()),
            ModelKind::AnomalyTransformer => Model::AnomalyTransformer(
                AnomalyTransformer::init(&AnomTransConfig::default(), 0).unwrap(),
            ),
        };
        let cfg = TrainConfig {
            epochs: match kind {
                ModelKind::CLstm => 8,
                ModelKind::AnomalyTransformer => 4,
            },
            batch_size: kind.default_batch_size(),
            threshold: kind.default_threshold(),
            learning_rate: kind.default_lr(),
            seed: 0,
            stop_at_f1: Some(0.90),
        };
        let out = match train::train(&mut model, &prepared.train, &prepared.val, &prepared.transform, &cfg)
        {
            Ok(o) => o,
            Err(e) => return Fail(format!("{} training: {e}", kind.as_str())),
        };
        let best = &out.run.best;
        if best.val_f1 < 0.90 {
            return Fail(format!(
                "{} reached F1 {:.4} (P {:.4}, R {:.4}) after {} epochs",
                kind.as_str(),
                best.val_f1,
                best.val_precision,
                best.val_recall,
                out.run.history.len()
            ));
        }
        outcomes.push(format!(
            "{} F1 {:.2} in {} epoch(s)",
            kind.as_str(),
            best.val_f1,
            best.epoch
        ));
    }
    let elapsed = started.elapsed();
    if elapsed > budget {
        return Fail(format!("took {:.0}s, budget is 600s", elapsed.as_secs_f64()));
    }
    Pass(format!("{} within {:.0}s of the 600s budget", outcomes.join(", "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 7. Reproduction on the real labeled dataset, when present. Looks for
// `$PUMPWATCH_DATASET_DIR/features_15s.csv`, falling back to `./data` and
// the repository root's `data/`. Ten seeded runs per detector; every run
// must reach the tabulated F1 minus two points.

fn c7_real_dataset() -> Outcome {
    let mut candidates = Vec::new();
    if let Ok(dir) = std::env::var("PUMPWATCH_DATASET_DIR") {
        candidates.push(std::path::PathBuf::from(dir));
    }
    candidates.push("data".into());
    candidates.push(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data").into());
    let Some(csv) = candidates
        .iter()
        .map(|d| d.join("features_15s.csv"))
        .find(|p| p.exists())
    else {
        return Skip(
            "no labeled dataset found (set PUMPWATCH_DATASET_DIR or place data/features_15s.csv)"
                .into(),
        );
    };

    let file = match std::fs::File::open(&csv) {
        Ok(f) => f,
        Err(e) => return Fail(format!("open {}: {e}", csv.display())),
    };
    let loaded = match load_feature_csv(std::io::BufReader::new(file), ChunkSize::S15) {
        Ok(l) => l,
        Err(e) => return Fail(format!("parse {}: {e}", csv.display())),
    };
    let prepared = match dataset::prepare(&loaded.series, &PipelineConfig::default()) {
        Ok(p) => p,
        Err(e) => return Fail(format!("prepare: {e}")),
    };

    let seeds: Vec<u64> = (0..10).collect();
    let mut summary = Vec::new();
    for kind in [ModelKind::CLstm, ModelKind::AnomalyTransformer] {
        let reference = train::reference_row(kind, ChunkSize::S15).unwrap();
        let bar = (reference.f1 - 2.0) / 100.0;
        let base = TrainConfig {
            epochs: kind.default_epochs(),
            batch_size: kind.default_batch_size(),
            threshold: kind.default_threshold(),
            learning_rate: kind.default_lr(),
            seed: 0,
            stop_at_f1: Some(bar),
        };
        let results = match train::run_seeds(
            &seeds,
            &base,
            &prepared.train,
            &prepared.val,
            &prepared.transform,
            |s| {
                Ok(match kind {
                    ModelKind::CLstm => Model::CLstm(CLstm::init(&CLstmConfig::default(), s)?),
                    ModelKind::AnomalyTransformer => Model::AnomalyTransformer(
                        AnomalyTransformer::init(&AnomTransConfig::default(), s)?,
                    ),
                })
            },
        ) {
            Ok(r) => r,
            Err(e) => return Fail(format!("{} runs: {e}", kind.as_str())),
        };
        let f1s: Vec<f64> = results.iter().map(|r| r.best.val_f1).collect();
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        let low = f1s.iter().copied().fold(f64::INFINITY, f64::min);
        if low < bar {
            return Fail(format!(
                "{}: a seed stopped at F1 {low:.4}, bar is {bar:.4} (tabulated {:.1} − 2 points)",
                kind.as_str(),
                reference.f1
            ));
        }
        let (_, half) = train::confidence_interval(&f1s, 0.95).unwrap();
        summary.push(format!(
            "{} mean F1 {:.1} ± {:.1} over {} seeds",
            kind.as_str(),
            mean * 100.0,
            half * 100.0,
            seeds.len()
        ));
    }
    Pass(summary.join("; "))
}

// ---------------------------------------------------------------------------
// 8. Streaming replay must reproduce batch scoring exactly (tolerance
// 1e-12; the implementation shares kernels, so the observed gap is 0).

fn c8_replay_equals_batch() -> Outcome {
    // Three regular pumps plus one shorter than the window, to exercise the
    // end-of-pump flush.
    let spec = SynthSpec {
        n_pumps: 3,
        pump_len: 60,
        anomaly_len: 8,
        amplitude: 8.0,
        chunk_size: ChunkSize::S15,
        ..Default::default()
    };
    let mut rows = dataset::synthesize(&spec, 5).unwrap().rows().to_vec();
    rows.extend((0..3).map(|i| row(90, i, 0)));
    let series = ChunkSeries::new(ChunkSize::S15, rows).unwrap();

    let seg_len = 5usize;
    let mask = [5usize]; // the pump-identity column
    let transform = InputTransform::fit(series.rows(), &mask, true);

    let mut worst: f64 = 0.0;
    let mut windows = 0usize;
    for (name, model) in [
        (
            "clstm",
            Model::CLstm(
                CLstm::init(&CLstmConfig { conv_out: 6, lstm_hidden: 8, ..Default::default() }, 3)
                    .unwrap(),
            ),
        ),
        (
            "anomaly_transformer",
            Model::AnomalyTransformer(
                AnomalyTransformer::init(
                    &AnomTransConfig {
                        seq_len: seg_len,
                        n_layers: 2,
                        d_model: 8,
                        n_heads: 2,
                        d_ff: 8,
                        ..Default::default()
                    },
                    3,
                )
                .unwrap(),
            ),
        ),
    ] {
        // Batch path: segment every pump, score in one call per window.
        let mut batch = std::collections::BTreeMap::new();
        for pump in group_and_filter(&series, 0, false) {
            for seg in segment_pump(&pump, seg_len).unwrap() {
                let (x, _) = transform.batch_tensor(&[&seg]).unwrap();
                let p = model.predict(&x).unwrap()[0];
                batch.insert((seg.pump_index, seg.position), p);
            }
        }
        // Streamed path.
        let entries =
            replay_rows(model.clone(), transform.clone(), seg_len, 0.5, series.rows()).unwrap();
        if entries.len() != batch.len() {
            return Fail(format!(
                "{name}: {} streamed windows vs {} batch windows",
                entries.len(),
                batch.len()
            ));
        }
        for e in &entries {
            let Some(&expect) = batch.get(&(e.pump_index, e.position)) else {
                return Fail(format!(
                    "{name}: streamed window (pump {}, position {}) missing from batch",
                    e.pump_index, e.position
                ));
            };
            let diff = (e.probability - expect).abs();
            worst = worst.max(diff);
            if diff > 1e-12 {
                return Fail(format!(
                    "{name}: pump {} position {} differs by {diff:.3e}",
                    e.pump_index, e.position
                ));
            }
            windows += 1;
        }
    }
    Pass(format!("{windows} windows across both detectors, worst gap {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 9. Determinism: repeating preparation and training with the same seeds
// yields byte-identical caches, checkpoints, and result CSVs.

fn c9_determinism() -> Outcome {
    let spec = SynthSpec {
        n_pumps: 3,
        pump_len: 120,
        anomaly_len: 10,
        amplitude: 8.0,
        chunk_size: ChunkSize::S15,
        ..Default::default()
    };
    let tmp = tempfile::tempdir().unwrap();

    let run = |tag: &str| -> Result<(Vec<u8>, Vec<u8>, String, String), String> {
        let series = dataset::synthesize(&spec, 4).map_err(|e| e.to_string())?;
        let cfg = PipelineConfig { seg_len: 6, undersample: 0.5, min_pump_chunks: 50, ..Default::default() };
        let prepared = dataset::prepare(&series, &cfg).map_err(|e| e.to_string())?;
        let cache = tmp.path().join(format!("{tag}.pwds"));
        prepared.save(&cache).map_err(|e| e.to_string())?;

        let mut model = Model::AnomalyTransformer(
            AnomalyTransformer::init(
                &AnomTransConfig { seq_len: 6, n_layers: 2, d_model: 8, n_heads: 2, d_ff: 8, ..Default::default() },
                1,
            )
            .map_err(|e| e.to_string())?,
        );
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            threshold: 0.48,
            learning_rate: 1e-3,
            seed: 1,
            stop_at_f1: None,
        };
        let out =
            train::train(&mut model, &prepared.train, &prepared.val, &prepared.transform, &tcfg)
                .map_err(|e| e.to_string())?;

        let ckpt = pumpwatch::nn::Checkpoint {
            config_hash: prepared.config_hash,
            model_kind: model.kind().as_str().to_string(),
            seed: tcfg.seed,
            epoch: out.run.best.epoch,
            best: None,
            buffers: prepared.transform.to_buffers(),
            params: out.best_params,
        };
        let ckpt_path = tmp.path().join(format!("{tag}.pwck"));
        ckpt.save(&ckpt_path).map_err(|e| e.to_string())?;

        let results =
            train::results_csv(model.kind(), ChunkSize::S15, std::slice::from_ref(&out.run));
        let curves =
            train::curves_csv(model.kind(), ChunkSize::S15, std::slice::from_ref(&out.run));
        Ok((
            std::fs::read(&cache).unwrap(),
            std::fs::read(&ckpt_path).unwrap(),
            results,
            curves,
        ))
    };

    let a = match run("a") {
        Ok(v) => v,
        Err(e) => return Fail(e),
    };
    let b = match run("b") {
        Ok(v) => v,
        Err(e) => return Fail(e),
    };
    if a.0 != b.0 {
        return Fail("dataset caches differ between identical runs".into());
    }
    if a.1 != b.1 {
        return Fail("checkpoints differ between identical runs".into());
    }
    if a.2 != b.2 {
        return Fail("results CSVs differ between identical runs".into());
    }
    if a.3 != b.3 {
        return Fail("curve CSVs differ between identical runs".into());
    }
    Pass(format!(
        "cache ({} bytes), checkpoint ({} bytes), and result CSVs byte-identical across reruns",
        a.0.len(),
        a.1.len()
    ))
}
