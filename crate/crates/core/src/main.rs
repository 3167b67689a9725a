//! Operator surface: `aggregate`, `prepare`, `train`, `eval`, `replay`,
//! `report`, all driven by one TOML config (see [`pumpwatch::config`]).
//!
//! Exit codes: 0 success, 2 configuration/validation problem, 1 runtime
//! failure.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pumpwatch::config::{ConfigError, RunConfig};
use pumpwatch::dataset::{self, PreparedDataset};
use pumpwatch::ingest::{
    aggregate_chunks, load_feature_csv, parse_trades, write_feature_csv, ChunkSize, TradeFormat,
    FEATURE_CSV_HEADER,
};
use pumpwatch::models::{Model, ModelKind};
use pumpwatch::nn::{BestMetrics, Checkpoint};
use pumpwatch::replay::Replayer;
use pumpwatch::train::{self, TrainConfig};
use pumpwatch::InputTransform;

#[derive(Parser)]
#[command(
    name = "pumpwatch",
    version,
    about = "Pump-and-dump detection over exchange trade streams"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Cmd {
    /// Aggregate raw trades into a chunk-feature CSV
    Aggregate {
        /// Raw trades file (CSV with the documented header, or JSONL)
        input: PathBuf,
        /// Output feature CSV path
        #[arg(long)]
        out: PathBuf,
        /// Chunk width in seconds: 5, 15, or 25
        #[arg(long, default_value_t = 15)]
        chunk_size: u32,
        /// Input format; inferred from the file extension when omitted
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Rolling window, in chunks, behind the std/avg features
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Pump index stamped on every row
        #[arg(long, default_value_t = 0)]
        pump_index: i64,
        /// Symbol id stamped on every row
        #[arg(long, default_value_t = 0)]
        symbol: i64,
        /// Symbol name written to the CSV (defaults to the bare id)
        #[arg(long)]
        symbol_name: Option<String>,
        /// Pump announcement time, ms since epoch; chunks overlapping
        /// [start, end] get label 1
        #[arg(long)]
        label_start_ms: Option<i64>,
        /// Pump end time, ms since epoch
        #[arg(long)]
        label_end_ms: Option<i64>,
    },
    /// Build and cache the model-ready dataset described by the config
    Prepare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the configured detector; writes checkpoint, history, results
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the prepared validation split
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path (default: <output.dir>/checkpoint.pwck)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prepared dataset path (default: the config's cache path)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Decision threshold (default: the checkpoint's training threshold)
        #[arg(long)]
        threshold: Option<f64>,
        /// Also emit a 101-row threshold sweep over [0, 1] in 0.01 steps
        #[arg(long)]
        sweep: bool,
    },
    /// Stream a feature CSV through a checkpoint, one line per chunk
    Replay {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path (default: <output.dir>/checkpoint.pwck)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Feature CSV to stream, in arrival order
        #[arg(long)]
        input: PathBuf,
        /// Pacing: 0 = as fast as possible, 1 = real time
        #[arg(long, default_value_t = 0.0)]
        speed: f64,
        /// Also write the log to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train across train.seeds and summarize against the reference table
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Errors carrying their exit code: validation problems exit 2, runtime
/// failures exit 1.
#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            ConfigError::Parse(_) | ConfigError::Invalid(_) => CliError::Validation(e.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    pumpwatch::ingest::IngestError,
    pumpwatch::dataset::DatasetError,
    pumpwatch::nn::NnError,
    pumpwatch::train::TrainError,
    pumpwatch::replay::ReplayError,
    std::io::Error
);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Aggregate {
            input,
            out,
            chunk_size,
            format,
            window,
            pump_index,
            symbol,
            symbol_name,
            label_start_ms,
            label_end_ms,
        } => cmd_aggregate(
            &input,
            &out,
            chunk_size,
            format,
            window,
            pump_index,
            symbol,
            symbol_name,
            label_start_ms,
            label_end_ms,
        ),
        Cmd::Prepare { config } => cmd_prepare(&config),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Eval { config, checkpoint, dataset, threshold, sweep } => {
            cmd_eval(&config, checkpoint, dataset, threshold, sweep)
        }
        Cmd::Replay { config, checkpoint, input, speed, out } => {
            cmd_replay(&config, checkpoint, &input, speed, out)
        }
        Cmd::Report { config } => cmd_report(&config),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_aggregate(
    input: &Path,
    out: &Path,
    chunk_size: u32,
    format: Option<FormatArg>,
    window: usize,
    pump_index: i64,
    symbol: i64,
    symbol_name: Option<String>,
    label_start_ms: Option<i64>,
    label_end_ms: Option<i64>,
) -> Result<(), CliError> {
    let chunk_size = ChunkSize::from_secs(chunk_size)
        .map_err(|_| CliError::validation("chunk_size must be one of 5, 15, 25"))?;
    let label_span = match (label_start_ms, label_end_ms) {
        (Some(a), Some(b)) if a <= b => Some((a, b)),
        (Some(_), Some(_)) => {
            return Err(CliError::validation("label_start_ms must be ≤ label_end_ms"))
        }
        (None, None) => None,
        _ => {
            return Err(CliError::validation(
                "label_start_ms and label_end_ms must be given together",
            ))
        }
    };
    let format = match format {
        Some(FormatArg::Csv) => TradeFormat::Csv,
        Some(FormatArg::Jsonl) => TradeFormat::Jsonl,
        None => match input.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => TradeFormat::Jsonl,
            _ => TradeFormat::Csv,
        },
    };

    let text = fs::read_to_string(input)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", input.display())))?;
    let is_blank = text.trim().is_empty();
    let parsed = if is_blank {
        None
    } else {
        let parsed = parse_trades(text.as_bytes(), format)?;
        if parsed.events.is_empty() {
            None
        } else {
            Some(parsed)
        }
    };

    let Some(parsed) = parsed else {
        log::warn!("{} contains no trades; writing a header-only CSV", input.display());
        fs::write(out, format!("{FEATURE_CSV_HEADER}\n"))
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", out.display())))?;
        println!("aggregated 0 chunks across 0 pumps -> {}", out.display());
        return Ok(());
    };

    if parsed.inversions > 0 {
        log::warn!("input had {} out-of-order trade pairs; sorted by timestamp", parsed.inversions);
    }
    let series =
        aggregate_chunks(&parsed.events, chunk_size, window, pump_index, symbol, label_span)?;
    let symbols = match symbol_name {
        Some(name) => {
            let mut v = vec![String::new(); usize::try_from(symbol).unwrap_or(0) + 1];
            v[usize::try_from(symbol).unwrap_or(0)] = name;
            v
        }
        None => Vec::new(),
    };
    let file = File::create(out)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", out.display())))?;
    write_feature_csv(&series, &symbols, BufWriter::new(file))?;
    println!(
        "aggregated {} chunks across 1 pump ({} labeled positive) -> {}",
        series.len(),
        series.positive_count(),
        out.display()
    );
    Ok(())
}

/// The chunk series a config describes: the synthetic source when present,
/// otherwise the configured feature CSV.
fn build_series(cfg: &RunConfig) -> Result<pumpwatch::ChunkSeries, CliError> {
    if let Some(spec) = &cfg.data.synth {
        return Ok(dataset::synthesize(spec, cfg.data.seed)?);
    }
    let Some(path) = &cfg.data.feature_csv else {
        return Err(CliError::validation(
            "config needs a data source: set data.feature_csv or add a [data.synth] section",
        ));
    };
    let file = File::open(path)
        .map_err(|e| CliError::runtime(format!("cannot open {}: {e}", path.display())))?;
    let loaded = load_feature_csv(BufReader::new(file), cfg.chunk_size())?;
    Ok(loaded.series)
}

fn prepare_dataset(cfg: &RunConfig) -> Result<PreparedDataset, CliError> {
    let series = build_series(cfg)?;
    log::info!(
        "source: {} chunks, {} positive",
        series.len(),
        series.positive_count()
    );
    Ok(dataset::prepare(&series, &cfg.pipeline_config())?)
}

/// Load the segment cache, or build and save it when absent. A cache whose
/// hash disagrees with the config is refused rather than silently reused.
fn load_or_prepare(cfg: &RunConfig) -> Result<PreparedDataset, CliError> {
    let path = cfg.cache_path();
    if path.exists() {
        let prepared = PreparedDataset::load(&path)?;
        if prepared.config_hash != cfg.data_hash() {
            return Err(CliError::validation(format!(
                "dataset cache {} was prepared under a different data config (hash {} vs {}); \
                 delete it or re-run `pumpwatch prepare`",
                path.display(),
                hex8(&prepared.config_hash),
                hex8(&cfg.data_hash()),
            )));
        }
        log::info!("loaded dataset cache {}", path.display());
        return Ok(prepared);
    }
    let prepared = prepare_dataset(cfg)?;
    ensure_parent(&path)?;
    prepared.save(&path)?;
    log::info!("wrote dataset cache {}", path.display());
    Ok(prepared)
}

fn cmd_prepare(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let prepared = prepare_dataset(&cfg)?;
    let path = cfg.cache_path();
    ensure_parent(&path)?;
    prepared.save(&path)?;
    let positives = |segs: &[pumpwatch::Segment]| segs.iter().filter(|s| s.label == 1).count();
    println!(
        "prepared {} train segments ({} positive) and {} validation segments ({} positive) -> {}",
        prepared.train.len(),
        positives(&prepared.train),
        prepared.val.len(),
        positives(&prepared.val),
        path.display()
    );
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.output.dir.join("checkpoint.pwck"))
}

fn cmd_train(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let prepared = load_or_prepare(&cfg)?;
    let kind = cfg.model.kind;
    let seed = cfg.train.seed;
    let mut model = cfg.build_model(seed)?;
    let train_cfg = cfg.train_config(seed);

    println!("model: {}", kind.as_str());
    println!("parameters: {}", model.param_count());
    println!(
        "training {} epochs, batch size {}, threshold {}, seed {}",
        train_cfg.epochs, train_cfg.batch_size, train_cfg.threshold, seed
    );

    let output =
        train::train(&mut model, &prepared.train, &prepared.val, &prepared.transform, &train_cfg)?;
    let run = &output.run;

    let ckpt = Checkpoint {
        config_hash: prepared.config_hash,
        model_kind: kind.as_str().to_string(),
        seed,
        epoch: run.best.epoch,
        best: Some(BestMetrics {
            epoch: run.best.epoch,
            threshold: run.threshold,
            precision: run.best.val_precision,
            recall: run.best.val_recall,
            f1: run.best.val_f1,
        }),
        buffers: prepared.transform.to_buffers(),
        params: output.best_params,
    };
    let ckpt_path = checkpoint_path(&cfg, None);
    ensure_parent(&ckpt_path)?;
    ckpt.save(&ckpt_path)?;

    let chunk_size = cfg.chunk_size();
    let results = vec![run.clone()];
    write_text(&cfg.output.dir.join("history.csv"), &train::curves_csv(kind, chunk_size, &results))?;
    write_text(&cfg.output.dir.join("results.csv"), &train::results_csv(kind, chunk_size, &results))?;

    println!(
        "best epoch {}: precision {:.4}, recall {:.4}, F1 {:.4}",
        run.best.epoch, run.best.val_precision, run.best.val_recall, run.best.val_f1
    );
    println!("checkpoint -> {}", ckpt_path.display());
    println!("history -> {}", cfg.output.dir.join("history.csv").display());
    println!("results -> {}", cfg.output.dir.join("results.csv").display());
    Ok(())
}

/// Load a checkpoint and rebuild its model from the config's hyperparameter
/// sections, refusing kind or shape mismatches.
fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, Model), CliError> {
    let ckpt = Checkpoint::load(path)
        .map_err(|e| CliError::runtime(format!("cannot load checkpoint {}: {e}", path.display())))?;
    let kind: ModelKind = ckpt
        .model_kind
        .parse()
        .map_err(|_| CliError::runtime(format!("unknown checkpoint model kind {:?}", ckpt.model_kind)))?;
    if kind != cfg.model.kind {
        return Err(CliError::validation(format!(
            "checkpoint holds a {} but the config selects {}",
            ckpt.model_kind,
            cfg.model.kind.as_str()
        )));
    }
    let mut model = cfg.build_model(ckpt.seed)?;
    model
        .set_params(ckpt.params.clone())
        .map_err(|e| CliError::validation(format!("checkpoint does not fit the configured model: {e}")))?;
    Ok((ckpt, model))
}

fn cmd_eval(
    config: &Path,
    checkpoint: Option<PathBuf>,
    dataset_path: Option<PathBuf>,
    threshold: Option<f64>,
    sweep: bool,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    if let Some(t) = threshold {
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(CliError::validation(format!("threshold must be in [0, 1], got {t}")));
        }
    }
    let ds_path = dataset_path.unwrap_or_else(|| cfg.cache_path());
    let prepared = PreparedDataset::load(&ds_path)
        .map_err(|e| CliError::runtime(format!("cannot load dataset {}: {e}", ds_path.display())))?;
    let ckpt_path = checkpoint_path(&cfg, checkpoint);
    let (ckpt, model) = load_model(&cfg, &ckpt_path)?;

    if ckpt.config_hash != prepared.config_hash {
        return Err(CliError::validation(format!(
            "config hash mismatch: checkpoint {} vs dataset {} — these artifacts come from \
             different data configs",
            hex8(&ckpt.config_hash),
            hex8(&prepared.config_hash),
        )));
    }

    let threshold = threshold
        .or(ckpt.best.map(|b| b.threshold))
        .unwrap_or_else(|| cfg.model.kind.default_threshold());
    let batch_size = cfg.train_config(ckpt.seed).batch_size;
    let (probs, labels) =
        train::predict_all(&model, &prepared.val, &prepared.transform, batch_size)?;
    let m = train::compute_metrics(&probs, &labels, threshold)?;

    println!(
        "validation: {} segments, threshold {threshold}",
        prepared.val.len()
    );
    println!(
        "precision {:.4} | recall {:.4} | F1 {:.4}   (tp {} fp {} tn {} fn {})",
        m.precision,
        m.recall,
        m.f1,
        m.counts.true_positives,
        m.counts.false_positives,
        m.counts.true_negatives,
        m.counts.false_negatives
    );

    let mut eval_csv = String::from("model,chunk_size,seed,epoch,precision,recall,f1,threshold\n");
    eval_csv.push_str(&format!(
        "{},{},{},{},{},{},{},{}\n",
        cfg.model.kind.as_str(),
        cfg.chunk_size().seconds(),
        ckpt.seed,
        ckpt.epoch,
        m.precision,
        m.recall,
        m.f1,
        threshold
    ));
    write_text(&cfg.output.dir.join("eval.csv"), &eval_csv)?;
    println!("metrics -> {}", cfg.output.dir.join("eval.csv").display());

    if sweep {
        let mut table = String::from("threshold,precision,recall,f1\n");
        println!("\nthreshold sweep (0.00..1.00, step 0.01):");
        for i in 0..=100u32 {
            let t = f64::from(i) / 100.0;
            let m = train::compute_metrics(&probs, &labels, t)?;
            table.push_str(&format!("{},{},{},{}\n", t, m.precision, m.recall, m.f1));
            if i % 10 == 0 {
                println!("  t={t:.2}  P {:.4}  R {:.4}  F1 {:.4}", m.precision, m.recall, m.f1);
            }
        }
        write_text(&cfg.output.dir.join("sweep.csv"), &table)?;
        println!("sweep -> {}", cfg.output.dir.join("sweep.csv").display());
    }
    Ok(())
}

fn cmd_replay(
    config: &Path,
    checkpoint: Option<PathBuf>,
    input: &Path,
    speed: f64,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    if !(speed >= 0.0 && speed.is_finite()) {
        return Err(CliError::validation(format!("speed must be a finite value ≥ 0, got {speed}")));
    }
    let ckpt_path = checkpoint_path(&cfg, checkpoint);
    let (ckpt, model) = load_model(&cfg, &ckpt_path)?;
    let transform = InputTransform::from_buffers(&ckpt.buffers)?;
    let threshold = ckpt
        .best
        .map(|b| b.threshold)
        .unwrap_or_else(|| cfg.model.kind.default_threshold());

    let file = File::open(input)
        .map_err(|e| CliError::runtime(format!("cannot open {}: {e}", input.display())))?;
    let loaded = load_feature_csv(BufReader::new(file), cfg.chunk_size())?;
    let rows = loaded.series.rows();

    let mut sink: Option<BufWriter<File>> = match out {
        Some(p) => Some(BufWriter::new(File::create(&p).map_err(|e| {
            CliError::runtime(format!("cannot write {}: {e}", p.display()))
        })?)),
        None => None,
    };
    // Downstream may close the pipe early (`... | head`). Keep filling the
    // --out file; just stop talking to stdout.
    let mut stdout_open = true;
    let mut emit = |line: &str| -> Result<(), CliError> {
        if stdout_open {
            use std::io::Write as _;
            if let Err(e) = writeln!(std::io::stdout(), "{line}") {
                if e.kind() == std::io::ErrorKind::BrokenPipe {
                    stdout_open = false;
                } else {
                    return Err(e.into());
                }
            }
        }
        if let Some(w) = sink.as_mut() {
            writeln!(w, "{line}")?;
        }
        Ok(())
    };

    emit("date,probability,alert")?;
    let pace = cfg.chunk_size().seconds() as f64;
    let mut replayer = Replayer::new(model, transform, cfg.data.segment_length, threshold)?;
    let mut alerts = 0usize;
    let mut emitted = 0usize;
    for row in rows {
        if speed > 0.0 {
            std::thread::sleep(std::time::Duration::from_secs_f64(pace / speed));
        }
        for entry in replayer.push(row)? {
            alerts += usize::from(entry.alert);
            emitted += 1;
            emit(&format!("{},{},{}", entry.date, entry.probability, u8::from(entry.alert)))?;
        }
    }
    for entry in replayer.finish()? {
        alerts += usize::from(entry.alert);
        emitted += 1;
        emit(&format!("{},{},{}", entry.date, entry.probability, u8::from(entry.alert)))?;
    }
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    log::info!("replayed {emitted} chunks, {alerts} alerts");
    Ok(())
}

fn cmd_report(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let prepared = load_or_prepare(&cfg)?;
    let seeds = cfg.seeds();
    let kind = cfg.model.kind;
    let base: TrainConfig = cfg.train_config(cfg.train.seed);

    log::info!("running {} seeded trainings: {:?}", seeds.len(), seeds);
    let results = train::run_seeds(
        &seeds,
        &base,
        &prepared.train,
        &prepared.val,
        &prepared.transform,
        |s| cfg.build_model(s).map_err(Into::into),
    )?;

    let chunk_size = cfg.chunk_size();
    let report = train::report(kind, chunk_size, &results, train::REFERENCE_TABLE)?;
    write_text(&cfg.output.dir.join("results.csv"), &report.results_csv)?;
    write_text(&cfg.output.dir.join("curves.csv"), &report.curves_csv)?;
    write_text(&cfg.output.dir.join("report.txt"), &report.text)?;
    print!("{}", report.text);
    println!("results -> {}", cfg.output.dir.join("results.csv").display());
    println!("curves  -> {}", cfg.output.dir.join("curves.csv").display());
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, content)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn hex8(hash: &[u8; 32]) -> String {
    hex::encode(&hash[..4])
}
