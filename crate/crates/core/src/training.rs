//! Seeded mini-batch training, early stopping, run artifacts and the
//! dataset × mode × seed ablation matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, AutodiffError, Tape};
use crate::datasets::{split, Dataset, DatasetError, DatasetName, Sample, DEFAULT_SPLIT};
use crate::encoding::{EncodedInput, EncodingConfig, InputStats};
use crate::losses::{combine, contrastive_loss, l2_tape, objective_tape, trajectory_mse, LossBreakdown, LossError, LossWeights, TargetBatch};
use crate::model::{evaluate, Mode, ModelConfig, ModelError, TimeviewDModel};

/// Environment variable holding the default ablation worker count.
pub const WORKERS_ENV: &str = "TIMEVIEW_WORKERS";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    /// Divergence or a collapsed encoder rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::Loss(LossError::ZeroNorm(_))
                | TrainError::Autodiff(AutodiffError::NonFiniteGradient(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub seed: u64,
    pub patience: usize,
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            mode: Mode::TrendsProperties,
            epochs: 2000,
            batch_size: 64,
            lr: 1e-3,
            alpha: w.alpha,
            beta: w.beta,
            tau: w.tau,
            seed: 0,
            patience: 50,
            split: DEFAULT_SPLIT,
        }
    }
}

impl TrainConfig {
    /// Loss weights with `β` forced to 0 outside the contrastive mode.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: if self.mode.contrastive() { self.beta } else { 0.0 },
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        Ok(())
    }
}

/// One row of `log.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: LogSplit,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSplit {
    Train,
    Val,
}

/// Deterministic metrics of a run; this is what `metrics.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub dataset: DatasetName,
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub test_mse: f64,
    pub test_r2: f64,
    pub init_test_mse: f64,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub log: Vec<LogRow>,
    pub wall_seconds: f64,
    pub model: TimeviewDModel,
    /// Run directory when artifacts were written.
    pub run_dir: Option<PathBuf>,
}

/// Fully resolved inputs of one run; hashed to name its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: crate::datasets::DatasetSpec,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub encoding: EncodingConfig,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// A sample with its encoding and normalization applied once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x_static: Vec<f64>,
    pub input: EncodedInput,
    pub times: Vec<f64>,
    pub targets: Vec<f64>,
}

pub fn prepare(model: &TimeviewDModel, samples: &[Sample]) -> Result<Vec<Prepared>, ModelError> {
    samples
        .par_iter()
        .map(|s| {
            Ok(Prepared {
                x_static: s.static_features.clone(),
                input: model.encode(&s.dynamic)?,
                times: s.times.clone(),
                targets: s.targets.clone(),
            })
        })
        .collect()
}

/// Predicted trajectories at each sample's own times.
pub fn predict_all(model: &TimeviewDModel, data: &[Prepared]) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(256) {
        let xs: Vec<&[f64]> = chunk.iter().map(|p| p.x_static.as_slice()).collect();
        let inputs: Vec<&EncodedInput> = chunk.iter().map(|p| &p.input).collect();
        let latents = model.forward_batch(&xs, &inputs)?;
        for (m, p) in latents.m.iter().zip(chunk) {
            out.push(evaluate(&model.basis, m, &p.times)?);
        }
    }
    Ok(out)
}

/// Two-level MSE and pooled `R² = 1 − SS_res/SS_tot` over all points.
pub fn evaluate_split(model: &TimeviewDModel, data: &[Prepared]) -> Result<(f64, f64), TrainError> {
    let preds = predict_all(model, data)?;
    let targets: Vec<Vec<f64>> = data.iter().map(|p| p.targets.clone()).collect();
    let mse = trajectory_mse(&preds, &targets)?;
    let all: Vec<f64> = targets.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let ss_tot: f64 = all.iter().map(|y| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = preds.iter().flatten().zip(&all).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((mse, 1.0 - ss_res / ss_tot))
}

fn validation_breakdown(model: &TimeviewDModel, data: &[Prepared], weights: LossWeights) -> Result<LossBreakdown, TrainError> {
    let xs: Vec<&[f64]> = data.iter().map(|p| p.x_static.as_slice()).collect();
    let inputs: Vec<&EncodedInput> = data.iter().map(|p| &p.input).collect();
    let latents = model.forward_batch(&xs, &inputs)?;
    let preds = latents
        .m
        .iter()
        .zip(data)
        .map(|(m, p)| evaluate(&model.basis, m, &p.times))
        .collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<Vec<f64>> = data.iter().map(|p| p.targets.clone()).collect();
    let mse = trajectory_mse(&preds, &targets)?;
    let contrastive = if weights.beta != 0.0 {
        contrastive_loss(&latents.h_s, &latents.h_d, weights.tau)?
    } else {
        0.0
    };
    Ok(LossBreakdown::new(mse, model.params.l2_penalty(), contrastive, weights))
}

/// One optimizer step on `batch`; returns the recorded loss.
fn train_step(
    model: &mut TimeviewDModel,
    adam: &mut Adam,
    batch: &[&Prepared],
    weights: LossWeights,
) -> Result<LossBreakdown, TrainError> {
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let xs: Vec<&[f64]> = batch.iter().map(|p| p.x_static.as_slice()).collect();
    let inputs: Vec<&EncodedInput> = batch.iter().map(|p| &p.input).collect();
    let out = model.forward_tape(&tape, &vars, &xs, &inputs)?;
    let times: Vec<&[f64]> = batch.iter().map(|p| p.times.as_slice()).collect();
    let targets: Vec<&[f64]> = batch.iter().map(|p| p.targets.as_slice()).collect();
    let mse = TargetBatch::new(&model.basis, &times, &targets)?.mse_tape(&tape, out.m)?;
    let l2 = l2_tape(&tape, &vars, &model.params);
    let obj = objective_tape(&tape, mse, l2, Some((out.h_s, out.h_d)), weights)?;
    let loss = obj.breakdown(&tape, weights);
    if !loss.total.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    let grads = tape.backward(obj.total)?;
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    adam.step(&mut model.params, &grads)?;
    Ok(loss)
}

/// Train one `(dataset, mode, seed)` cell. When `runs_root` is given the run
/// directory `runs_root/<config-hash>/` receives the checkpoint, model card,
/// loss log and metrics.
pub fn train(dataset: &Dataset, config: &RunConfig, runs_root: Option<&Path>) -> Result<RunResult, TrainError> {
    let started = Instant::now();
    let tc = &config.train;
    tc.validate()?;
    config.encoding.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let weights = tc.weights();
    let dataset_hash = dataset.content_hash();
    let parts = split(&dataset.samples, tc.split, tc.seed)?;
    let stats = InputStats::from_samples(&parts.train);
    let mut model = TimeviewDModel::new(
        tc.mode,
        &config.model,
        dataset.spec.horizon,
        stats,
        config.encoding.clone(),
        tc.seed,
        dataset_hash.clone(),
    )?;
    let train_set = prepare(&model, &parts.train)?;
    let val_set = prepare(&model, &parts.val)?;
    let test_set = prepare(&model, &parts.test)?;
    let (init_test_mse, _) = evaluate_split(&model, &test_set)?;

    let mut adam = Adam::new(
        AdamConfig {
            lr: tc.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_5eed);
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.values());
    let mut epochs_run = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sums, mut seen) = ([0.0; 4], 0usize);
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(&mut model, &mut adam, &batch, weights).map_err(|e| match e {
                TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { epoch, batch: b },
                other => other,
            })?;
            let k = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([loss.mse, loss.l2, loss.contrastive, loss.total]) {
                *s += k * v;
            }
            seen += batch.len();
        }
        let n = seen as f64;
        let (mse, l2, c) = (sums[0] / n, sums[1] / n, sums[2] / n);
        log.push(LogRow {
            epoch,
            split: LogSplit::Train,
            loss: LossBreakdown {
                mse,
                l2,
                contrastive: c,
                total: combine(mse, l2, c, weights),
                alpha: weights.alpha,
                beta: weights.beta,
                tau: weights.tau,
            },
        });
        let val = validation_breakdown(&model, &val_set, weights)?;
        log.push(LogRow {
            epoch,
            split: LogSplit::Val,
            loss: val,
        });
        epochs_run = epoch + 1;
        if !val.mse.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
        if val.mse < best.0 {
            best = (val.mse, epoch, model.params.values());
        } else if epoch - best.1 >= tc.patience {
            break;
        }
    }
    model.params.set_values(&best.2)?;
    let (test_mse, test_r2) = evaluate_split(&model, &test_set)?;
    let metrics = RunMetrics {
        dataset: dataset.spec.name,
        mode: tc.mode,
        seed: tc.seed,
        config_hash: config.hash(),
        dataset_hash,
        test_mse,
        test_r2,
        init_test_mse,
        best_epoch: best.1,
        best_val_mse: best.0,
        epochs_run,
    };
    let wall_seconds = started.elapsed().as_secs_f64();
    let run_dir = match runs_root {
        Some(root) => Some(write_run(root, config, &model, &log, &metrics, wall_seconds)?),
        None => None,
    };
    Ok(RunResult {
        metrics,
        log,
        wall_seconds,
        model,
        run_dir,
    })
}

pub fn log_csv(log: &[LogRow]) -> String {
    let mut out = String::from("epoch,split,mse,l2,contrastive,total\n");
    for r in log {
        let split = match r.split {
            LogSplit::Train => "train",
            LogSplit::Val => "val",
        };
        let l = &r.loss;
        writeln!(out, "{},{split},{},{},{},{}", r.epoch, l.mse, l.l2, l.contrastive, l.total).expect("string write");
    }
    out
}

fn write_run(
    root: &Path,
    config: &RunConfig,
    model: &TimeviewDModel,
    log: &[LogRow],
    metrics: &RunMetrics,
    wall_seconds: f64,
) -> Result<PathBuf, TrainError> {
    let dir = root.join(&metrics.config_hash);
    model.save(&dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    fs::write(dir.join("log.csv"), log_csv(log))?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(metrics)? + "\n")?;
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&serde_json::json!({ "wall_seconds": wall_seconds }))? + "\n")?;
    Ok(dir)
}

/// Outcome of one ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub dataset: DatasetName,
    pub mode: Mode,
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub datasets: Vec<DatasetName>,
    pub modes: Vec<Mode>,
    pub cells: Vec<CellResult>,
}

/// Mean and population standard deviation of successful seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub mean: f64,
    pub std: f64,
    pub ok: usize,
    pub failed: usize,
}

impl AblationTable {
    pub fn summary(&self, dataset: DatasetName, mode: Mode) -> CellSummary {
        let cells = self.cells.iter().filter(|c| c.dataset == dataset && c.mode == mode);
        let (mut values, mut failed) = (Vec::new(), 0);
        for c in cells {
            match &c.metrics {
                Some(m) => values.push(m.test_mse),
                None => failed += 1,
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        CellSummary {
            mean,
            std,
            ok: values.len(),
            failed,
        }
    }

    /// Every cell, one row per `(dataset, mode, seed)`.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("dataset,mode,seed,status,test_mse,test_r2,best_epoch,error\n");
        for c in &self.cells {
            match &c.metrics {
                Some(m) => writeln!(out, "{},{},{},ok,{},{},{},", c.dataset, c.mode, c.seed, m.test_mse, m.test_r2, m.best_epoch),
                None => writeln!(
                    out,
                    "{},{},{},failed,,,,\"{}\"",
                    c.dataset,
                    c.mode,
                    c.seed,
                    c.error.as_deref().unwrap_or("").replace('"', "'")
                ),
            }
            .expect("string write");
        }
        out
    }

    /// Ablation table as CSV: one row per mode, mean and std per dataset.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("method");
        for d in &self.datasets {
            write!(out, ",{d}_mean,{d}_std,{d}_failed").expect("string write");
        }
        out.push('\n');
        for &mode in &self.modes {
            out.push_str(mode.label());
            for &d in &self.datasets {
                let s = self.summary(d, mode);
                write!(out, ",{},{},{}", s.mean, s.std, s.failed).expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable ablation table.
    pub fn table_text(&self) -> String {
        let label_width = self.modes.iter().map(|m| m.label().len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<label_width$}", "Method");
        for d in &self.datasets {
            write!(out, "  {:>17}", d.title()).expect("string write");
        }
        out.push('\n');
        for &mode in &self.modes {
            write!(out, "{:<label_width$}", mode.label()).expect("string write");
            for &d in &self.datasets {
                let s = self.summary(d, mode);
                let cell = if s.ok == 0 {
                    "failed".to_string()
                } else if s.failed > 0 {
                    format!("{:.3} ± {:.3}*", s.mean, s.std)
                } else {
                    format!("{:.3} ± {:.3}", s.mean, s.std)
                };
                write!(out, "  {cell:>17}").expect("string write");
            }
            out.push('\n');
        }
        if self.cells.iter().any(|c| c.metrics.is_none()) {
            out.push_str("* some seeds failed; see cells.csv\n");
        }
        out
    }
}

/// Worker count from [`WORKERS_ENV`], else the available parallelism.
pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Train every `(dataset, mode, seed)` cell on a pool of `workers` threads.
/// Failed cells are recorded and the matrix continues.
pub fn ablation_matrix(
    datasets: &[Dataset],
    modes: &[Mode],
    seeds: &[u64],
    base: &RunConfig,
    workers: usize,
    runs_root: Option<&Path>,
) -> Result<AblationTable, TrainError> {
    let jobs: Vec<(usize, Mode, u64)> = (0..datasets.len())
        .flat_map(|d| modes.iter().flat_map(move |&m| seeds.iter().map(move |&s| (d, m, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let cells = pool.install(|| {
        jobs.par_iter()
            .map(|&(d, mode, seed)| {
                let dataset = &datasets[d];
                let config = RunConfig {
                    dataset: dataset.spec.clone(),
                    train: TrainConfig {
                        mode,
                        seed,
                        ..base.train.clone()
                    },
                    model: base.model.clone(),
                    encoding: base.encoding.clone(),
                };
                let outcome = train(dataset, &config, runs_root);
                CellResult {
                    dataset: dataset.spec.name,
                    mode,
                    seed,
                    metrics: outcome.as_ref().ok().map(|r| r.metrics.clone()),
                    error: outcome.err().map(|e| e.to_string()),
                }
            })
            .collect()
    });
    Ok(AblationTable {
        datasets: datasets.iter().map(|d| d.spec.name).collect(),
        modes: modes.to_vec(),
        cells,
    })
}
