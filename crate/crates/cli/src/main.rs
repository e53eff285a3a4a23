//! `capsnet` — train, evaluate, and sweep capsule-network runs.
//!
//! Subcommands mirror the run configuration with kebab-case flags; a
//! `--config <file>` flat key=value file supplies defaults that explicit
//! flags override. Exits 0 on success, non-zero with a message otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capsnet_core::data::{DatasetKind, SplitName};
use capsnet_core::error::Error;
use capsnet_core::model::Preset;
use capsnet_core::routing::RoutingAlgorithm;
use capsnet_core::train::{self, OptimizerKind, Precision, RunConfig};

#[derive(Parser)]
#[command(name = "capsnet", version, about = "Capsule-network training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv plus a checkpoint
    Train(RunFlags),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalFlags),
    /// Train one model per (algorithm, iterations) cell and tabulate
    /// test accuracies
    Sweep(SweepFlags),
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Flat key=value configuration file; explicit flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// mnist | fashion-mnist
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding mnist/ and fashion/ IDX files
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// desk | paper
    #[arg(long)]
    preset: Option<String>,
    /// cognitive-consistency | baseline
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    routing_iters: Option<usize>,
    #[arg(long)]
    a_min: Option<f64>,
    #[arg(long)]
    a_max: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// adam | sgd
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 | f64
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Keep only the first N training samples (0 = all)
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    val_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// Write 0.000 in the wall_seconds column (byte-identical replays)
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct EvalFlags {
    /// Checkpoint file written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Override the data directory stored in the checkpoint
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepFlags {
    #[command(flatten)]
    run: RunFlags,
    /// Comma-separated routing iteration counts, e.g. 1,3,5
    #[arg(long, value_delimiter = ',')]
    r_list: Vec<usize>,
}

fn parse_enum<T>(what: &str, value: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T, Error> {
    parse(value).ok_or_else(|| Error::InvalidConfig(format!("unknown {what} {value:?}")))
}

impl RunFlags {
    /// defaults < config file < explicit flags
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut config = RunConfig::default();
        let mut output_dir_set = false;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let pairs: Vec<(String, String)> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| {
                    l.split_once('=')
                        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                        .ok_or_else(|| {
                            Error::InvalidConfig(format!("config line {l:?} is not key=value"))
                        })
                })
                .collect::<Result<_, _>>()?;
            output_dir_set = pairs.iter().any(|(k, _)| k == "output-dir");
            config.apply_kv(&pairs)?;
        }
        if let Some(v) = &self.dataset {
            config.dataset = parse_enum("dataset", v, DatasetKind::parse)?;
        }
        if let Some(v) = &self.data_dir {
            config.data_dir = v.clone();
        }
        if let Some(v) = &self.preset {
            config.preset = parse_enum("preset", v, Preset::parse)?;
        }
        if let Some(v) = &self.algorithm {
            config.algorithm = parse_enum("algorithm", v, RoutingAlgorithm::parse)?;
        }
        if let Some(v) = self.routing_iters {
            config.routing_iters = v;
        }
        if let Some(v) = self.a_min {
            config.a_min = v;
        }
        if let Some(v) = self.a_max {
            config.a_max = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = &self.optimizer {
            config.optimizer = parse_enum("optimizer", v, OptimizerKind::parse)?;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = &self.precision {
            config.precision = parse_enum("precision", v, Precision::parse)?;
        }
        if let Some(v) = &self.output_dir {
            config.output_dir = v.clone();
            output_dir_set = true;
        }
        if let Some(v) = self.val_fraction {
            config.val_fraction = v;
        }
        if let Some(v) = self.train_limit {
            config.train_limit = v;
        }
        if let Some(v) = self.val_limit {
            config.val_limit = v;
        }
        if let Some(v) = self.test_limit {
            config.test_limit = v;
        }
        if self.no_timing {
            config.timing = false;
        }
        if !output_dir_set {
            config.output_dir = PathBuf::from("runs").join(format!(
                "{}-{}-{}-r{}-seed{}",
                config.dataset.name(),
                config.preset.name(),
                config.algorithm.name(),
                config.routing_iters,
                config.seed
            ));
        }
        Ok(config)
    }
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Train(flags) => {
            let config = flags.resolve()?;
            println!(
                "training {} / {} preset, {} routing, r={}, {} epochs (seed {})",
                config.dataset.name(),
                config.preset.name(),
                config.algorithm.name(),
                config.routing_iters,
                config.epochs,
                config.seed
            );
            let outcome = train::train(&config)?;
            for row in &outcome.history {
                println!(
                    "epoch {:>3}: train_loss {:.6} train_acc {:.4} val_loss {:.6} val_acc {:.4} ({:.1}s)",
                    row.epoch, row.train_loss, row.train_acc, row.val_loss, row.val_acc,
                    row.wall_seconds
                );
            }
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(())
        }
        Command::Eval(flags) => {
            let split = match flags.split.as_str() {
                "train" => SplitName::Train,
                "val" => SplitName::Val,
                "test" => SplitName::Test,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown split {other:?}")));
                }
            };
            let report =
                train::evaluate_checkpoint(&flags.checkpoint, split, flags.data_dir.as_deref())?;
            println!(
                "{}: accuracy {:.4}, loss {:.6} ({} samples)",
                flags.split, report.accuracy, report.loss, report.samples
            );
            Ok(())
        }
        Command::Sweep(flags) => {
            if flags.r_list.is_empty() {
                return Err(Error::InvalidConfig("--r-list must not be empty".to_string()));
            }
            let config = flags.run.resolve()?;
            let report = train::sweep(&config, &flags.r_list)?;
            print!("{}", report.to_table());
            println!("table: {}", config.output_dir.join("sweep.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
