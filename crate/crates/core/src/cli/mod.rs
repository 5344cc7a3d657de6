//! Command-line front end. Every subcommand writes into `--out DIR` and is
//! byte-for-byte reproducible; wall-clock timings go to a separate
//! `timing.json` so the other outputs stay comparable across reruns.

mod config;

pub use config::{parse_grid, parse_seeds, set_hyper, ConfigError, RunConfig, HYPER_KEYS};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::datagen::{decode_dataset, make_dataset, write_dataset, DatagenError, Dataset, DatasetStats, SynthConfig};
use crate::emcheck::{run_em_checks, EmCheckError};
use crate::model::{read_checkpoint, write_checkpoint, ModelError};
use crate::numerics::{NumericsError, Tensor};
use crate::par::Exec;
use crate::refinement::write_refinement_csv;
use crate::trainer::{forward_all, run_ablation, run_grid, train_with, Hyperparams, SweepTable, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Format(_) => 4,
            CliError::Shape(_) => 5,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

fn from_datagen(path: &Path, e: DatagenError) -> CliError {
    match e {
        DatagenError::Param(m) => CliError::Config(m),
        DatagenError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
        DatagenError::Io(source) => CliError::io(path, source),
    }
}

fn from_model(path: &Path, e: ModelError) -> CliError {
    match e {
        ModelError::Numerics(n) => from_numerics(n),
        ModelError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
        ModelError::Shape(m) => CliError::Shape(m),
        ModelError::Io(source) => CliError::io(path, source),
    }
}

/// Shape mismatches keep their meaning; a run that degenerates numerically
/// is reported as a configuration problem.
fn from_numerics(e: NumericsError) -> CliError {
    match e {
        NumericsError::Shape(m) => CliError::Shape(m),
        other => CliError::Config(format!("training diverged: {other}")),
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Param(m) => CliError::Config(m),
            TrainError::Numerics(n) => from_numerics(n),
            TrainError::Model(m) => from_model(Path::new("<model>"), m),
            e @ TrainError::NonFiniteLoss { .. } => CliError::Config(format!("training diverged: {e}")),
        }
    }
}

impl From<EmCheckError> for CliError {
    fn from(e: EmCheckError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "urrl", version, about = "Representation learning under unreliable partial labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its realized statistics.
    Synth(SynthArgs),
    /// Train one model and write metrics, report and checkpoint.
    Train(TrainArgs),
    /// Run the four-row ablation over several seeds.
    Ablate(GridArgs),
    /// Sweep one hyperparameter over several seeds.
    Sweep(SweepArgs),
    /// Numerically verify the EM identities and bounds.
    Emcheck(EmcheckArgs),
    /// Write the embeddings of every instance under a checkpoint.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds, e.g. `1,2,3`.
    #[arg(long)]
    pub seeds: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub grid_args: GridArgs,
    /// `KEY=V1,V2,...` over one hyperparameter.
    #[arg(long)]
    pub grid: String,
}

#[derive(Debug, Args)]
pub struct EmcheckArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Random configurations per identity check.
    #[arg(long, default_value_t = 1000)]
    pub configs: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RunConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_dataset(&bytes).map_err(|e| from_datagen(path, e))
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn write_timing(dir: &Path, start: Instant) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Timing {
        wall_time_secs: f64,
    }
    let t = Timing { wall_time_secs: start.elapsed().as_secs_f64() };
    write_file(&dir.join("timing.json"), to_json(&t))
}

#[derive(Serialize)]
struct SynthSidecar<'a> {
    config: &'a SynthConfig,
    stats: DatasetStats,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.synth.seed = args.seed;
    let ds = make_dataset(&cfg.synth).map_err(|e| from_datagen(&args.out, e))?;
    prepare_out(&args.out)?;
    let path = args.out.join("dataset.upll");
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).map_err(|e| from_datagen(&path, e))?;
    write_file(&path, bytes)?;
    let stats = ds.stats();
    println!("wrote {} instances: coverage {:.4}, mean |S| {:.4}", stats.n, stats.coverage, stats.mean_set_size);
    write_file(&args.out.join("dataset.json"), to_json(&SynthSidecar { config: &cfg.synth, stats }))
}

#[derive(Serialize)]
struct TrainReport<'a> {
    seed: u64,
    best_epoch: usize,
    best_val_acc: f64,
    test_acc: f64,
    epochs_run: usize,
    initial_coverage: f64,
    final_coverage: f64,
    /// Training instances whose set missed the truth at the start.
    initially_missing: usize,
    /// Of those, how many sets contain the truth after training.
    recovered: usize,
    config: &'a Hyperparams,
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = load_config(args.config.as_deref())?;
    cfg.hyper.validate()?;
    let ds = load_dataset(&args.data)?;
    prepare_out(&args.out)?;

    let mut metrics = String::new();
    let out = train_with(Exec::default(), &ds, &cfg.hyper, args.seed, |m| {
        log::info!("epoch {} loss {:.4} val {:.4} test {:.4}", m.epoch, m.loss, m.val_acc, m.test_acc);
        metrics.push_str(&serde_json::to_string(m).expect("plain data serializes"));
        metrics.push('\n');
    })?;
    write_file(&args.out.join("metrics.jsonl"), metrics)?;

    let ckpt = args.out.join("checkpoint.bin");
    let mut bytes = Vec::new();
    write_checkpoint(&out.params, &mut bytes).map_err(|e| from_model(&ckpt, e))?;
    write_file(&ckpt, bytes)?;

    let truth: Vec<usize> = out.train_indices.iter().map(|&i| ds.true_labels[i]).collect();
    let mut csv = Vec::new();
    write_refinement_csv(&mut csv, &out.train_indices, &out.final_sets, &truth, &out.final_labels)
        .expect("writing to memory");
    write_file(&args.out.join("refinement.csv"), csv)?;

    let n = truth.len().max(1) as f64;
    let missing: Vec<usize> = (0..truth.len()).filter(|&k| !out.initial_sets[k].contains(truth[k])).collect();
    let recovered = missing.iter().filter(|&&k| out.final_sets[k].contains(truth[k])).count();
    let final_covered = (0..truth.len()).filter(|&k| out.final_sets[k].contains(truth[k])).count();
    let report = TrainReport {
        seed: args.seed,
        best_epoch: out.best_epoch,
        best_val_acc: out.best_val_acc,
        test_acc: out.test_acc,
        epochs_run: out.history.len(),
        initial_coverage: 1.0 - missing.len() as f64 / n,
        final_coverage: final_covered as f64 / n,
        initially_missing: missing.len(),
        recovered,
        config: &cfg.hyper,
    };
    write_file(&args.out.join("report.json"), to_json(&report))?;
    println!(
        "best epoch {} val {:.4} test {:.4}; recovered {}/{} candidate sets",
        out.best_epoch,
        out.best_val_acc,
        out.test_acc,
        recovered,
        missing.len()
    );
    write_timing(&args.out, start)
}

fn write_table(dir: &Path, stem: &str, table: &SweepTable) -> Result<(), CliError> {
    write_file(&dir.join(format!("{stem}_raw.csv")), table.raw_csv())?;
    write_file(&dir.join(format!("{stem}_summary.csv")), table.aggregate_csv())?;
    write_file(&dir.join(format!("{stem}.json")), to_json(table))?;
    for agg in &table.aggregates {
        println!("{:<16} {:.4} ± {:.4} (n = {})", agg.config, agg.mean, agg.std, agg.runs);
    }
    Ok(())
}

pub fn cmd_ablate(args: &GridArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = load_config(args.config.as_deref())?;
    let seeds = parse_seeds(&args.seeds).map_err(CliError::Config)?;
    let ds = load_dataset(&args.data)?;
    cfg.hyper.validate()?;
    prepare_out(&args.out)?;
    let table = run_ablation(Exec::default(), &ds, &cfg.hyper, &seeds)?;
    write_table(&args.out, "ablation", &table)?;
    write_timing(&args.out, start)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let g = &args.grid_args;
    let cfg = load_config(g.config.as_deref())?;
    let seeds = parse_seeds(&g.seeds).map_err(CliError::Config)?;
    let (key, values) = parse_grid(&args.grid).map_err(CliError::Config)?;
    let mut configs = Vec::with_capacity(values.len());
    for v in &values {
        let mut h = cfg.hyper.clone();
        set_hyper(&mut h, &key, v).map_err(CliError::Config)?;
        h.validate()?;
        configs.push((format!("{key}={v}"), h));
    }
    let ds = load_dataset(&g.data)?;
    prepare_out(&g.out)?;
    let table = run_grid(Exec::default(), &ds, &configs, &seeds)?;
    write_table(&g.out, "sweep", &table)?;
    write_timing(&g.out, start)
}

pub fn cmd_emcheck(args: &EmcheckArgs) -> Result<(), CliError> {
    let start = Instant::now();
    prepare_out(&args.out)?;
    let report = run_em_checks(Exec::default(), args.seed, args.configs)?;
    for c in &report.checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {:<24} {:.3e} (tolerance {:.0e})", c.name, c.value, c.tolerance);
    }
    write_file(&args.out.join("emcheck.json"), to_json(&report))?;
    write_timing(&args.out, start)
}

pub fn cmd_export_embeddings(args: &ExportArgs) -> Result<(), CliError> {
    let bytes = fs::read(&args.checkpoint).map_err(|e| CliError::io(&args.checkpoint, e))?;
    let params = read_checkpoint(bytes.as_slice()).map_err(|e| from_model(&args.checkpoint, e))?;
    let ds = load_dataset(&args.data)?;
    if params.dims().input != ds.dim {
        return Err(CliError::Shape(format!(
            "checkpoint expects {} input features, dataset has {}",
            params.dims().input,
            ds.dim
        )));
    }
    let x = Tensor::matrix(ds.len(), ds.dim, ds.features.clone());
    let (emb, _) = forward_all(Exec::default(), &params, &x).map_err(|e| from_model(&args.checkpoint, e))?;
    let mut csv = String::from("instance_id,true_label");
    for j in 0..emb.cols() {
        let _ = write!(csv, ",e{j}");
    }
    csv.push('\n');
    for i in 0..ds.len() {
        let _ = write!(csv, "{i},{}", ds.true_labels[i]);
        for &v in emb.row(i) {
            let _ = write!(csv, ",{}", v as f32);
        }
        csv.push('\n');
    }
    prepare_out(&args.out)?;
    write_file(&args.out.join("embeddings.csv"), csv)
}

/// Size the global rayon pool from `URRL_THREADS` when it is set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("URRL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("URRL_THREADS must be a positive integer, got `{raw}`")))?;
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Emcheck(a) => cmd_emcheck(a),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(a),
    }
}
