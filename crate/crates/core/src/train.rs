//! Run configuration, optimizers, the training loop, evaluation, and the
//! iteration sweep.
//!
//! A run is fully determined by its `RunConfig`: the same seed and
//! configuration replay to bit-identical metrics at 64-bit precision
//! (enable `timing=off` to also freeze the wall-clock column).

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::data::{self, BatchPlan, DatasetKind, DatasetSplit, SplitName};
use crate::error::{Error, Result};
use crate::model::{self, MarginLossConfig, Mode, ModelConfig, Parameters, Preset};
use crate::routing::{RoutingAlgorithm, RoutingConfig};
use crate::tensor::{Dtype, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub preset: Preset,
    pub algorithm: RoutingAlgorithm,
    pub routing_iters: usize,
    pub a_min: f64,
    pub a_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub val_fraction: f64,
    /// 0 keeps the full split.
    pub train_limit: usize,
    pub val_limit: usize,
    pub test_limit: usize,
    /// With timing off the wall_seconds column is written as 0.000 so that
    /// replayed runs produce byte-identical metrics files.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data"),
            preset: Preset::Desk,
            algorithm: RoutingAlgorithm::CognitiveConsistency,
            routing_iters: 3,
            a_min: 0.0,
            a_max: 1.0,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            precision: Precision::F64,
            output_dir: PathBuf::from("runs"),
            val_fraction: 0.2,
            train_limit: 0,
            val_limit: 0,
            test_limit: 0,
            timing: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.routing_iters == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch size and routing iterations must be positive".to_string(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be non-negative".to_string()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig("val fraction must lie in (0, 1)".to_string()));
        }
        self.routing_config().validate()
    }

    pub fn routing_config(&self) -> RoutingConfig {
        RoutingConfig {
            iterations: self.routing_iters,
            a_min: self.a_min,
            a_max: self.a_max,
            algorithm: self.algorithm,
        }
    }

    /// Architecture for 28x28 single-channel inputs under this run.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::preset(self.preset, (1, 28, 28), self.routing_config())
    }

    /// Flat key=value snapshot (checkpoint metadata / config files).
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("dataset", self.dataset.name().to_string()),
            kv("data-dir", self.data_dir.display().to_string()),
            kv("preset", self.preset.name().to_string()),
            kv("algorithm", self.algorithm.name().to_string()),
            kv("routing-iters", self.routing_iters.to_string()),
            kv("a-min", format!("{}", self.a_min)),
            kv("a-max", format!("{}", self.a_max)),
            kv("epochs", self.epochs.to_string()),
            kv("batch-size", self.batch_size.to_string()),
            kv("learning-rate", format!("{}", self.learning_rate)),
            kv("optimizer", self.optimizer.name().to_string()),
            kv("seed", self.seed.to_string()),
            kv("precision", self.precision.name().to_string()),
            kv("output-dir", self.output_dir.display().to_string()),
            kv("val-fraction", format!("{}", self.val_fraction)),
            kv("train-limit", self.train_limit.to_string()),
            kv("val-limit", self.val_limit.to_string()),
            kv("test-limit", self.test_limit.to_string()),
            kv("timing", if self.timing { "on" } else { "off" }.to_string()),
        ]
    }

    /// Applies key=value pairs on top of `self`. Unknown keys error.
    pub fn apply_kv(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (key, value) in pairs {
            let bad = |what: &str| {
                Error::InvalidConfig(format!("{key}: cannot parse {value:?} as {what}"))
            };
            match key.as_str() {
                "dataset" => {
                    self.dataset = DatasetKind::parse(value).ok_or_else(|| bad("dataset"))?
                }
                "data-dir" => self.data_dir = PathBuf::from(value),
                "preset" => self.preset = Preset::parse(value).ok_or_else(|| bad("preset"))?,
                "algorithm" => {
                    self.algorithm =
                        RoutingAlgorithm::parse(value).ok_or_else(|| bad("algorithm"))?
                }
                "routing-iters" => {
                    self.routing_iters = value.parse().map_err(|_| bad("integer"))?
                }
                "a-min" => self.a_min = value.parse().map_err(|_| bad("number"))?,
                "a-max" => self.a_max = value.parse().map_err(|_| bad("number"))?,
                "epochs" => self.epochs = value.parse().map_err(|_| bad("integer"))?,
                "batch-size" => self.batch_size = value.parse().map_err(|_| bad("integer"))?,
                "learning-rate" => {
                    self.learning_rate = value.parse().map_err(|_| bad("number"))?
                }
                "optimizer" => {
                    self.optimizer = OptimizerKind::parse(value).ok_or_else(|| bad("optimizer"))?
                }
                "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
                "precision" => {
                    self.precision = Precision::parse(value).ok_or_else(|| bad("precision"))?
                }
                "output-dir" => self.output_dir = PathBuf::from(value),
                "val-fraction" => self.val_fraction = value.parse().map_err(|_| bad("number"))?,
                "train-limit" => self.train_limit = value.parse().map_err(|_| bad("integer"))?,
                "val-limit" => self.val_limit = value.parse().map_err(|_| bad("integer"))?,
                "test-limit" => self.test_limit = value.parse().map_err(|_| bad("integer"))?,
                "timing" => {
                    self.timing = match value.as_str() {
                        "on" => true,
                        "off" => false,
                        _ => return Err(bad("on|off")),
                    }
                }
                other => {
                    return Err(Error::InvalidConfig(format!("unknown configuration key {other}")))
                }
            }
        }
        Ok(())
    }
}

/// One metrics.csv row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds";

impl EpochMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc,
            self.wall_seconds
        )
    }
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

enum Optimizer<T: Real> {
    Sgd { lr: T },
    Adam { lr: T, beta1: T, beta2: T, eps: T, step: i32, m: Vec<Vec<T>>, v: Vec<Vec<T>> },
}

impl<T: Real> Optimizer<T> {
    fn new(kind: OptimizerKind, lr: f64, slots: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: T::c(lr) },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: T::c(lr),
                beta1: T::c(0.9),
                beta2: T::c(0.999),
                eps: T::c(1e-8),
                step: 0,
                m: vec![Vec::new(); slots],
                v: vec![Vec::new(); slots],
            },
        }
    }

    /// Applies one update from the accumulated gradients. Parameters whose
    /// gradient is absent are left untouched.
    fn step(&mut self, params: &[(&'static str, &Tensor<T>)]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (_, p) in params {
                    if let Some(g) = p.grad() {
                        let lr = *lr;
                        p.update_data(|data| {
                            for (d, gv) in data.iter_mut().zip(&g) {
                                *d = *d - lr * *gv;
                            }
                        });
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, step, m, v } => {
                *step += 1;
                let bc1 = T::one() - beta1.powi(*step);
                let bc2 = T::one() - beta2.powi(*step);
                for (slot, (_, p)) in params.iter().enumerate() {
                    let Some(g) = p.grad() else { continue };
                    let m = &mut m[slot];
                    let v = &mut v[slot];
                    if m.is_empty() {
                        m.resize(g.len(), T::zero());
                        v.resize(g.len(), T::zero());
                    }
                    let (b1, b2, lr, eps) = (*beta1, *beta2, *lr, *eps);
                    p.update_data(|data| {
                        for i in 0..g.len() {
                            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                            let m_hat = m[i] / bc1;
                            let v_hat = v[i] / bc2;
                            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    });
                }
            }
        }
    }
}

fn count_correct<T: Real>(capsules: &Tensor<T>, labels: &[usize]) -> usize {
    model::predict(capsules)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// Loss and accuracy of a split under eval-mode batch statistics, iterated
/// in natural order.
fn evaluate_split<T: Real>(
    params: &Parameters<T>,
    config: &ModelConfig,
    split: &DatasetSplit,
    batch_size: usize,
    loss_config: &MarginLossConfig,
) -> Result<(f64, f64)> {
    let n = split.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = split.batch::<T>(&indices);
        let capsules = model::forward(params, &images, config, Mode::Eval)?;
        let loss = model::margin_loss(&capsules, &labels, loss_config)?;
        loss_sum += loss.item().as_f64() * indices.len() as f64;
        correct += count_correct(&capsules, &labels);
        start = end;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

fn load_limited(config: &RunConfig) -> Result<data::Dataset> {
    let mut dataset =
        data::load_dataset(&config.data_dir, config.dataset, config.val_fraction, config.seed)?;
    dataset.train.truncate(config.train_limit);
    dataset.val.truncate(config.val_limit);
    dataset.test.truncate(config.test_limit);
    Ok(dataset)
}

/// Trains per the configuration, appending one metrics row and rewriting
/// the checkpoint after every epoch.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    match config.precision {
        Precision::F64 => train_t::<f64>(config),
        Precision::F32 => train_t::<f32>(config),
    }
}

fn train_t<T: Real>(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = config.model_config();
    let dataset = load_limited(config)?;
    if dataset.train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".to_string()));
    }

    let params = Parameters::<T>::init(&model_config, config.seed.wrapping_add(1))?;
    let trainable = params.trainable();
    let mut optimizer = Optimizer::<T>::new(config.optimizer, config.learning_rate, trainable.len());
    let mut plan =
        BatchPlan::new(config.seed.wrapping_add(2), config.batch_size, dataset.train.len())?;
    let loss_config = MarginLossConfig::default();

    fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::Io { path: config.output_dir.clone(), source: e })?;
    let metrics_path = config.output_dir.join("metrics.csv");
    let checkpoint_path = config.output_dir.join("checkpoint.bin");
    let mut metrics_file = File::create(&metrics_path)
        .map_err(|e| Error::Io { path: metrics_path.clone(), source: e })?;
    writeln!(metrics_file, "{METRICS_HEADER}")
        .map_err(|e| Error::Io { path: metrics_path.clone(), source: e })?;

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut batches = plan.epoch_batches();
        // a trailing single-sample batch would break train-mode batch norm;
        // fold it into the previous batch instead of dropping the sample
        if model_config.bn_enabled && batches.len() >= 2 {
            if let Some(last) = batches.last() {
                if last.len() == 1 {
                    let last = batches.pop().unwrap();
                    batches.last_mut().unwrap().extend(last);
                }
            }
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_index, indices) in batches.iter().enumerate() {
            let (images, labels) = dataset.train.batch::<T>(indices);
            // non-finite intermediates anywhere in the step surface with
            // the epoch/batch position attached
            let diverged = |e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch: batch_index },
                other => other,
            };
            let capsules =
                model::forward(&params, &images, &model_config, Mode::Train).map_err(diverged)?;
            let loss = model::margin_loss(&capsules, &labels, &loss_config).map_err(diverged)?;
            let loss_value = loss.item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_index });
            }
            loss_sum += loss_value * indices.len() as f64;
            correct += count_correct(&capsules, &labels);
            loss.backward()?;
            optimizer.step(&trainable);
            params.zero_grad();
        }
        let (val_loss, val_acc) = evaluate_split(
            &params,
            &model_config,
            &dataset.val,
            config.batch_size,
            &loss_config,
        )?;
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / dataset.train.len() as f64,
            train_acc: correct as f64 / dataset.train.len() as f64,
            val_loss,
            val_acc,
            wall_seconds: if config.timing { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        writeln!(metrics_file, "{}", row.csv_row())
            .map_err(|e| Error::Io { path: metrics_path.clone(), source: e })?;
        metrics_file
            .flush()
            .map_err(|e| Error::Io { path: metrics_path.clone(), source: e })?;
        checkpoint::save_checkpoint(
            &checkpoint_path,
            epoch as u32,
            &config.to_kv(),
            &params.all_named(),
        )?;
        history.push(row);
    }
    Ok(TrainOutcome { history, metrics_path, checkpoint_path })
}

/// Evaluates a checkpoint on a dataset split, reconstructing the run
/// configuration (and the train/val split) from the stored snapshot.
/// `data_dir` overrides the stored data directory when given.
pub fn evaluate_checkpoint(
    path: &Path,
    split: SplitName,
    data_dir: Option<&Path>,
) -> Result<EvalReport> {
    match checkpoint::checkpoint_dtype(path)? {
        Dtype::F64 => evaluate_checkpoint_t::<f64>(path, split, data_dir),
        Dtype::F32 => evaluate_checkpoint_t::<f32>(path, split, data_dir),
    }
}

fn evaluate_checkpoint_t<T: Real>(
    path: &Path,
    split: SplitName,
    data_dir: Option<&Path>,
) -> Result<EvalReport> {
    let loaded = checkpoint::load_checkpoint::<T>(path)?;
    let mut config = RunConfig::default();
    config.apply_kv(&loaded.config)?;
    if let Some(dir) = data_dir {
        config.data_dir = dir.to_path_buf();
    }
    let model_config = config.model_config();
    let params = Parameters::from_named(&model_config, loaded.tensors)?;
    let dataset = load_limited(&config)?;
    let split = match split {
        SplitName::Train => &dataset.train,
        SplitName::Val => &dataset.val,
        SplitName::Test => &dataset.test,
    };
    let (loss, accuracy) = evaluate_split(
        &params,
        &model_config,
        split,
        config.batch_size,
        &MarginLossConfig::default(),
    )?;
    Ok(EvalReport { loss, accuracy, samples: split.len() })
}

/// One sweep cell: a full training run plus its test-set evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SweepCell {
    pub algorithm: RoutingAlgorithm,
    pub routing_iters: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

pub struct SweepReport {
    pub r_values: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn accuracy(&self, algorithm: RoutingAlgorithm, r: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.algorithm == algorithm && c.routing_iters == r)
            .map(|c| c.test_accuracy)
    }

    /// Table layout mirroring the iteration-sweep comparison: one row per
    /// algorithm, one column per iteration count.
    pub fn to_table(&self) -> String {
        let mut out = String::from("algorithm");
        for r in &self.r_values {
            out.push_str(&format!(",r={r}"));
        }
        out.push('\n');
        for algorithm in [RoutingAlgorithm::Baseline, RoutingAlgorithm::CognitiveConsistency] {
            out.push_str(algorithm.name());
            for &r in &self.r_values {
                match self.accuracy(algorithm, r) {
                    Some(acc) => out.push_str(&format!(",{acc:.4}")),
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per (algorithm, iteration-count) pair with a shared
/// seed and reports test accuracies; artifacts land in per-cell
/// subdirectories of the configured output directory.
pub fn sweep(config: &RunConfig, r_values: &[usize]) -> Result<SweepReport> {
    if r_values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one iteration count".to_string()));
    }
    let mut cells = Vec::new();
    for algorithm in [RoutingAlgorithm::Baseline, RoutingAlgorithm::CognitiveConsistency] {
        for &r in r_values {
            let mut cell_config = config.clone();
            cell_config.algorithm = algorithm;
            cell_config.routing_iters = r;
            cell_config.output_dir =
                config.output_dir.join(format!("{}-r{r}", algorithm.name()));
            let outcome = train(&cell_config)?;
            let report = evaluate_checkpoint(&outcome.checkpoint_path, SplitName::Test, None)?;
            cells.push(SweepCell {
                algorithm,
                routing_iters: r,
                test_accuracy: report.accuracy,
                test_loss: report.loss,
            });
        }
    }
    let report = SweepReport { r_values: r_values.to_vec(), cells };
    let table_path = config.output_dir.join("sweep.csv");
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::Io { path: config.output_dir.clone(), source: e })?;
    fs::write(&table_path, report.to_table())
        .map_err(|e| Error::Io { path: table_path.clone(), source: e })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut config = RunConfig::default();
        config.dataset = DatasetKind::FashionMnist;
        config.algorithm = RoutingAlgorithm::Baseline;
        config.routing_iters = 5;
        config.learning_rate = 0.01;
        config.precision = Precision::F32;
        config.timing = false;
        let kv = config.to_kv();
        let mut rebuilt = RunConfig::default();
        rebuilt.apply_kv(&kv).unwrap();
        assert_eq!(format!("{config:?}"), format!("{rebuilt:?}"));
    }

    #[test]
    fn unknown_key_rejected() {
        let mut config = RunConfig::default();
        let err = config
            .apply_kv(&[("no-such-key".to_string(), "1".to_string())])
            .unwrap_err();
        assert!(err.to_string().contains("no-such-key"));
    }

    #[test]
    fn metrics_row_formatting() {
        let row = EpochMetrics {
            epoch: 3,
            train_loss: 0.1234567,
            train_acc: 0.5,
            val_loss: 1.0,
            val_acc: 0.25,
            wall_seconds: 0.0,
        };
        assert_eq!(row.csv_row(), "3,0.123457,0.500000,1.000000,0.250000,0.000");
    }
}
