//! Command-line front end: ingestion, configuration and run orchestration.
//!
//! Every command works on one run directory. `train` writes
//! `config.cfg`, `checkpoint.bin`, `train_log.jsonl`, `labeled_edges.tsv`,
//! `node_map.tsv` and, with injection, `clusters.tsv`. `evaluate` adds
//! `metrics_<split>.json`. Wall-clock times go to `timing.jsonl` so that all
//! other artifacts are reproducible byte for byte.

mod config;
mod load;

pub use config::{parse_list, DataFormat, ExperimentConfig, InjectionConfig};
pub use load::{load_edge_list, load_jodie_csv, load_labeled, write_labeled, Dataset, LoadError};

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{self, EvalError, SplitMetrics};
use crate::inject::{inject_anomalies, ClusterAssignment, InjectError};
use crate::objective::Orientation;
use crate::tgraph::EventStore;
use crate::trainer::{self, split_chronological, AblationFlags, Model, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("injection: {0}")]
    Inject(#[from] InjectError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
}

impl CliError {
    /// `1` for usage and configuration errors, `2` for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tgad", version, about = "Edge anomaly detection on temporal graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inject structural anomalies and write a labeled edge file.
    Inject(RunArgs),
    /// Train a model and write a checkpoint and training log.
    Train(RunArgs),
    /// Score a split with a checkpoint and write a metrics record.
    Evaluate(CheckpointArgs),
    /// Write the loss argument of every edge of a split as TSV.
    ExportEmbeddings(ExportArgs),
    /// Train and evaluate once per value of one configuration key.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Number of labeled anomalies.
    #[arg(long)]
    pub labels: Option<usize>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One of train, val, test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Configuration file; defaults to `config.cfg` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; defaults to the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub run: CheckpointArgs,
    /// Output file; defaults to `embeddings_<split>.tsv` in the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Configuration key to vary, e.g. `lambda` or `fanouts`.
    #[arg(long)]
    pub param: String,
    /// Grid points separated by `,`, or by `;` when a point is itself a list.
    #[arg(long)]
    pub values: String,
    #[arg(long, default_value = "test")]
    pub split: String,
}

/// Metrics file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub format: String,
    pub split: String,
    pub labels: usize,
    pub label_seed: u64,
    pub seed: u64,
    pub eval_seed: u64,
    pub inject_seed: Option<u64>,
    pub orientation: Orientation,
    pub lambda: f64,
    pub fanouts: Vec<usize>,
    pub ablation: AblationFlags,
    pub auc: f64,
    pub edges: usize,
    pub anomalies: usize,
    pub score_mean: f64,
    pub score_min: f64,
    pub score_max: f64,
}

impl MetricsRecord {
    fn new(cfg: &ExperimentConfig, split: &str, m: &SplitMetrics) -> Self {
        Self {
            dataset: cfg.dataset.display().to_string(),
            format: cfg.format.to_string(),
            split: split.to_string(),
            labels: cfg.labels,
            label_seed: cfg.label_seed,
            seed: cfg.seed,
            eval_seed: cfg.eval_seed,
            inject_seed: cfg.injection.enabled.then_some(cfg.injection.seed),
            orientation: cfg.orientation,
            lambda: cfg.lambda,
            fanouts: cfg.fanouts.clone(),
            ablation: cfg.ablation,
            auc: m.auc,
            edges: m.edges,
            anomalies: m.anomalies,
            score_mean: m.score_mean,
            score_min: m.score_min,
            score_max: m.score_max,
        }
    }
}

/// Data ready for training or scoring.
pub struct Prepared {
    pub dataset: Dataset,
    pub clusters: Option<ClusterAssignment>,
}

impl Prepared {
    pub fn store(&self) -> &EventStore {
        &self.dataset.store
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn append_timing(dir: &Path, line: &str) -> Result<()> {
    let path = dir.join("timing.jsonl");
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
    writeln!(f, "{line}").map_err(io_err(&path))
}

/// Reads and validates a config file, then applies overrides in order.
pub fn load_config(path: &Path, set: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for kv in set {
        cfg.apply_override(kv).map_err(CliError::Config)?;
    }
    Ok(cfg)
}

fn resolve(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&args.config, &args.set)?;
    if let Some(n) = args.labels {
        cfg.labels = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

/// Loads the dataset named by `cfg` and injects anomalies when enabled.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let mut dataset = match cfg.format {
        DataFormat::EdgeList => load_edge_list(&cfg.dataset)?,
        DataFormat::Jodie => load_jodie_csv(&cfg.dataset)?,
        DataFormat::Labeled => load_labeled(&cfg.dataset)?,
    };
    let mut clusters = None;
    if cfg.injection.enabled {
        let inj = inject_anomalies(&dataset.store, cfg.injection.rate, cfg.injection.k, cfg.injection.seed)?;
        dataset.store = inj.store;
        clusters = Some(inj.clusters);
    }
    Ok(Prepared { dataset, clusters })
}

fn write_data_sidecars(dir: &Path, cfg: &ExperimentConfig, data: &Prepared) -> Result<()> {
    if cfg.format != DataFormat::Labeled {
        let path = dir.join("node_map.tsv");
        data.dataset.write_node_map(create(&path)?).map_err(io_err(&path))?;
    }
    if let Some(c) = &data.clusters {
        let path = dir.join("clusters.tsv");
        let mut w = create(&path)?;
        c.write_tsv(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
    }
    Ok(())
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// `inject`: writes `injected.tsv` (labeled format) plus node map and clusters.
pub fn cmd_inject(args: &RunArgs) -> Result<PathBuf> {
    let mut cfg = resolve(args)?;
    cfg.injection.enabled = true;
    cfg.validate().map_err(CliError::Config)?;
    let data = prepare(&cfg)?;
    make_dir(&cfg.out)?;
    let path = cfg.out.join("injected.tsv");
    write_labeled(data.store(), create(&path)?).map_err(io_err(&path))?;
    write_data_sidecars(&cfg.out, &cfg, &data)?;
    Ok(path)
}

/// `train`: fits a model and writes the run directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<trainer::FitResult> {
    let start = Instant::now();
    let data = prepare(cfg)?;
    let dir = &cfg.out;
    make_dir(dir)?;
    write_file(&dir.join("config.cfg"), &cfg.to_text())?;
    let _ = fs::remove_file(dir.join("timing.jsonl"));
    write_data_sidecars(dir, cfg, &data)?;

    let log_path = dir.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let mut timing = Vec::new();
    let result = trainer::fit_with(data.store(), &cfg.train_config(), |rec| {
        let _ = writeln!(log, "{}", rec.log_line()).and_then(|_| log.flush());
        timing.push(rec.timing_line());
    });
    log.flush().map_err(io_err(&log_path))?;
    for line in &timing {
        append_timing(dir, line)?;
    }
    let result = result?;
    result.model.save(&dir.join("checkpoint.bin"))?;
    let mut labeled = String::new();
    for (id, y) in &result.labeled {
        labeled.push_str(&format!("{}\t{y}\n", id.0));
    }
    write_file(&dir.join("labeled_edges.tsv"), &labeled)?;
    append_timing(
        dir,
        &serde_json::json!({ "command": "train", "seconds": start.elapsed().as_secs_f64() }).to_string(),
    )?;
    Ok(result)
}

fn checkpoint_config(args: &CheckpointArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let dir = args
        .checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let config = args.config.clone().unwrap_or_else(|| dir.join("config.cfg"));
    let cfg = load_config(&config, &args.set)?;
    cfg.validate().map_err(CliError::Config)?;
    Ok((cfg, args.out.clone().unwrap_or(dir)))
}

fn split_range(cfg: &ExperimentConfig, store: &EventStore, split: &str) -> Result<std::ops::Range<usize>> {
    let splits = split_chronological(store.len(), &cfg.split)?;
    splits
        .by_name(split)
        .ok_or_else(|| CliError::Usage(format!("unknown split `{split}` (train, val, test)")))
}

/// Scores `split` with `model` and writes `metrics_<split>.json` into `dir`.
pub fn evaluate_to(cfg: &ExperimentConfig, data: &Prepared, model: &Model, split: &str, dir: &Path) -> Result<MetricsRecord> {
    let start = Instant::now();
    let range = split_range(cfg, data.store(), split)?;
    let metrics = evaluation::evaluate(model, data.store(), range, cfg.eval_seed, cfg.parallel)?;
    let record = MetricsRecord::new(cfg, split, &metrics);
    make_dir(dir)?;
    let json = serde_json::to_string_pretty(&record).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&dir.join(format!("metrics_{split}.json")), &(json + "\n"))?;
    append_timing(
        dir,
        &serde_json::json!({ "command": "evaluate", "split": split, "seconds": start.elapsed().as_secs_f64() })
            .to_string(),
    )?;
    Ok(record)
}

/// `evaluate`.
pub fn cmd_evaluate(args: &CheckpointArgs) -> Result<MetricsRecord> {
    let (cfg, dir) = checkpoint_config(args)?;
    let model = Model::load(&args.checkpoint)?;
    let data = prepare(&cfg)?;
    evaluate_to(&cfg, &data, &model, &args.split, &dir)
}

/// `export-embeddings`.
pub fn cmd_export(args: &ExportArgs) -> Result<PathBuf> {
    let (cfg, dir) = checkpoint_config(&args.run)?;
    let model = Model::load(&args.run.checkpoint)?;
    let data = prepare(&cfg)?;
    let range = split_range(&cfg, data.store(), &args.run.split)?;
    let path = match &args.output {
        Some(p) => p.clone(),
        None => {
            make_dir(&dir)?;
            dir.join(format!("embeddings_{}.tsv", args.run.split))
        }
    };
    let out = create(&path)?;
    evaluation::export_embeddings(&model, data.store(), range, cfg.eval_seed, cfg.parallel, out)?;
    Ok(path)
}

/// Splits a `--values` string into grid points.
pub fn sweep_points(values: &str) -> Vec<String> {
    let sep = if values.contains(';') { ';' } else { ',' };
    values
        .split(sep)
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect()
}

/// `sweep`: one run directory per grid point, plus `sweep_<param>.tsv`.
pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<MetricsRecord>> {
    let base = resolve(&args.run)?;
    let points = sweep_points(&args.values);
    if points.is_empty() {
        return Err(CliError::Usage("`--values` is empty".into()));
    }
    let mut configs = Vec::with_capacity(points.len());
    for (i, v) in points.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.set(&args.param, v).map_err(CliError::Config)?;
        cfg.out = base.out.join(format!("{}_{i}", args.param));
        cfg.validate().map_err(CliError::Config)?;
        configs.push(cfg);
    }
    make_dir(&base.out)?;
    let mut records = Vec::with_capacity(configs.len());
    let mut summary = format!("{}\tauc\n", args.param);
    for (cfg, v) in configs.iter().zip(&points) {
        let fit = cmd_train(cfg)?;
        let data = prepare(cfg)?;
        let record = evaluate_to(cfg, &data, &fit.model, &args.split, &cfg.out)?;
        summary.push_str(&format!("{v}\t{}\n", record.auc));
        records.push(record);
    }
    write_file(&base.out.join(format!("sweep_{}.tsv", args.param)), &summary)?;
    Ok(records)
}

/// Runs one parsed command, printing a short summary to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inject(a) => {
            let path = cmd_inject(&a)?;
            println!("wrote {}", path.display());
        }
        Command::Train(a) => {
            let cfg = resolve(&a)?;
            let fit = cmd_train(&cfg)?;
            let best = &fit.log[fit.best_epoch - 1];
            let auc = best.val_auc.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
            println!("best epoch {} (val auc {auc}); run directory {}", fit.best_epoch, cfg.out.display());
        }
        Command::Evaluate(a) => {
            let r = cmd_evaluate(&a)?;
            println!("{} auc {:.6} over {} edges ({} anomalies)", r.split, r.auc, r.edges, r.anomalies);
        }
        Command::ExportEmbeddings(a) => {
            let path = cmd_export(&a)?;
            println!("wrote {}", path.display());
        }
        Command::Sweep(a) => {
            for r in cmd_sweep(&a)? {
                println!("{} auc {:.6}", a.param, r.auc);
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_point_separators() {
        assert_eq!(sweep_points("0.001,0.01,0.1,1,10").len(), 5);
        assert_eq!(sweep_points("25,10,5;10,5"), vec!["25,10,5", "10,5"]);
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["tgad", "frobnicate"]), 1);
        assert_eq!(run(["tgad", "train"]), 1);
        assert_eq!(run(["tgad", "train", "--config", "/nonexistent/x.cfg"]), 1);
        assert_eq!(run(["tgad", "--help"]), 0);
    }
}
