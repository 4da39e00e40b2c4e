//! Seeded synthetic datasets with targets that depend on both static
//! features and exogenous series.
//!
//! Three generators are provided. `d-sine` and `d-beta` carry one exogenous
//! channel; `d-tumor` carries three vital-sign channels (blood pressure,
//! glucose, SpO₂) that modulate the growth and regression rates of a
//! tumor-volume curve. Generation consumes a single ChaCha8 stream in a fixed
//! order, so a [`DatasetSpec`] fully determines the dataset bytes.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Bumped whenever a generator's output changes for the same spec.
pub const GENERATOR_VERSION: u32 = 1;

/// Length of the observed exogenous window, in the same units as the series
/// sample grid `k / (t′ − 1)`.
pub const PAST_WINDOW: f64 = 1.0;

/// AR(1) coefficient of the vital-sign channels.
pub const VITALS_AR: f64 = 0.9;

/// Population means and standard deviations of the tumor channels, in
/// channel order (blood pressure, glucose, SpO₂).
pub const TUMOR_CHANNELS: [(&str, f64, f64); 3] = [("blood-pressure", 120.0, 10.0), ("glucose", 100.0, 15.0), ("spo2", 97.0, 1.5)];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown dataset `{0}` (valid: d-sine, d-beta, d-tumor)")]
    UnknownName(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("split of {n} samples leaves the {split} split empty")]
    EmptySplit { n: usize, split: &'static str },
    #[error("malformed dataset file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "d-sine")]
    Sine,
    #[serde(rename = "d-beta")]
    Beta,
    #[serde(rename = "d-tumor")]
    Tumor,
}

impl DatasetName {
    pub const ALL: [DatasetName; 3] = [DatasetName::Sine, DatasetName::Beta, DatasetName::Tumor];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Sine => "d-sine",
            DatasetName::Beta => "d-beta",
            DatasetName::Tumor => "d-tumor",
        }
    }

    /// Column label used in result tables.
    pub fn title(self) -> &'static str {
        match self {
            DatasetName::Sine => "D-Sine",
            DatasetName::Beta => "D-Beta",
            DatasetName::Tumor => "D-Tumor",
        }
    }

    pub fn default_noise_std(self) -> f64 {
        match self {
            DatasetName::Sine | DatasetName::Beta => 0.02,
            // Relative to V₀ for tumor volumes.
            DatasetName::Tumor => 0.004,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| DatasetError::UnknownName(s.to_string()))
    }
}

/// Everything needed to regenerate a dataset bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub n_samples: usize,
    pub seed: u64,
    /// Static feature count `M`.
    pub static_dim: usize,
    /// Exogenous channel count `D`.
    pub channels: usize,
    /// Exogenous series length `t′`.
    pub series_len: usize,
    /// Target measurements per sample `N_n`.
    pub target_len: usize,
    /// Trajectory horizon `T`.
    pub horizon: f64,
    /// Observation noise; for `d-tumor` a fraction of `V₀`.
    pub noise_std: f64,
}

impl DatasetSpec {
    pub fn new(name: DatasetName, n_samples: usize, seed: u64) -> Self {
        let (static_dim, channels) = match name {
            DatasetName::Sine => (3, 1),
            DatasetName::Beta => (2, 1),
            DatasetName::Tumor => (4, 3),
        };
        Self {
            name,
            n_samples,
            seed,
            static_dim,
            channels,
            series_len: 50,
            target_len: 20,
            horizon: 1.0,
            noise_std: name.default_noise_std(),
        }
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let fresh = DatasetSpec::new(self.name, self.n_samples, self.seed);
        let err = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.static_dim != fresh.static_dim || self.channels != fresh.channels {
            return err(format!(
                "{} has M={} and D={}, got M={} and D={}",
                self.name, fresh.static_dim, fresh.channels, self.static_dim, self.channels
            ));
        }
        if self.n_samples == 0 {
            return err("n_samples must be positive".into());
        }
        if self.series_len < 2 || self.target_len < 1 {
            return err("series_len must be ≥ 2 and target_len ≥ 1".into());
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return err(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return err(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }

    /// Uniform measurement times on `[0, T]`.
    pub fn target_times(&self) -> Vec<f64> {
        uniform_grid(self.target_len, self.horizon)
    }

    /// Sample grid of the exogenous series over the past window.
    pub fn series_times(&self) -> Vec<f64> {
        uniform_grid(self.series_len, PAST_WINDOW)
    }
}

fn uniform_grid(n: usize, end: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| end * i as f64 / (n - 1) as f64).collect()
}

/// One unit of data.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `x_s`, length `M`.
    pub static_features: Vec<f64>,
    /// `x_d`, one series of length `t′` per channel.
    pub dynamic: Vec<Vec<f64>>,
    /// Strictly increasing measurement times in `[0, T]`.
    pub times: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Sample {
    pub fn validate(&self) -> bool {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        self.times.len() == self.targets.len()
            && !self.times.is_empty()
            && self.times.windows(2).all(|w| w[0] < w[1])
            && finite(&self.static_features)
            && finite(&self.times)
            && finite(&self.targets)
            && self.dynamic.iter().all(|c| finite(c))
            && self.dynamic.windows(2).all(|w| w[0].len() == w[1].len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

/// Train/validation/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

/// `a·sin(b·t + c)·(1 + 0.5·tanh(f − 1.25))`.
pub fn sine_trajectory(a: f64, b: f64, c: f64, frequency: f64, t: f64) -> f64 {
    a * (b * t + c).sin() * (1.0 + 0.5 * (frequency - 1.25).tanh())
}

/// Beta-density shape `t^{p−1}(1−t)^{q−1}` divided by its maximum, which for
/// `p, q > 1` sits at the mode `(p − 1)/(p + q − 2)`.
pub fn beta_shape(p: f64, q: f64, t: f64) -> f64 {
    let raw = |t: f64| t.powf(p - 1.0) * (1.0 - t).powf(q - 1.0);
    let mode = (p - 1.0) / (p + q - 2.0);
    raw(t) / raw(mode)
}

/// Pooled standard deviation of a zero-start random walk whose increments are
/// `δ + 0.5·η` with `δ ~ U[−½, ½]` and `η ~ N(0, 1)`, over steps `0..len`.
pub fn beta_walk_scale(len: usize) -> f64 {
    let var_delta = 1.0 / 12.0;
    let var_noise = 0.25;
    let pooled: f64 = (0..len)
        .map(|k| {
            let k = k as f64;
            k * k * var_delta + k * var_noise
        })
        .sum::<f64>()
        / len as f64;
    pooled.sqrt()
}

/// `V₀·(e^{−d·t} + e^{g·t} − 1)`.
pub fn tumor_volume(v0: f64, growth: f64, decay: f64, t: f64) -> f64 {
    v0 * ((-decay * t).exp() + (growth * t).exp() - 1.0)
}

/// Growth and regression rates after vital-sign modulation.
pub fn tumor_rates(base_growth: f64, base_decay: f64, channels: &[Vec<f64>]) -> (f64, f64) {
    let zbar = |c: usize| {
        let (_, mean, sd) = TUMOR_CHANNELS[c];
        let m = channels[c].iter().sum::<f64>() / channels[c].len() as f64;
        (m - mean) / sd
    };
    let (z_bp, z_glucose, z_spo2) = (zbar(0), zbar(1), zbar(2));
    (
        base_growth * (1.0 + 0.4 * z_glucose),
        base_decay * (1.0 + 0.4 * z_spo2 - 0.2 * z_bp),
    )
}

/// Noise-free tumor trajectory from static features `(V₀, g₀, d₀, age)`.
pub fn tumor_trajectory(static_features: &[f64], channels: &[Vec<f64>], times: &[f64]) -> Vec<f64> {
    let (v0, g0, d0) = (static_features[0], static_features[1], static_features[2]);
    let (g, d) = tumor_rates(g0, d0, channels);
    times.iter().map(|&t| tumor_volume(v0, g, d, t)).collect()
}

/// Stationary AR(1) series around `mean` with marginal standard deviation `sd`.
pub fn ar1_series<R: Rng + ?Sized>(rng: &mut R, len: usize, mean: f64, sd: f64, phi: f64) -> Vec<f64> {
    let innovation = sd * (1.0 - phi * phi).sqrt();
    let mut x = mean + sd * rng.sample::<f64, _>(StandardNormal);
    let mut out = Vec::with_capacity(len);
    out.push(x);
    for _ in 1..len {
        x = mean + phi * (x - mean) + innovation * rng.sample::<f64, _>(StandardNormal);
        out.push(x);
    }
    out
}

/// Draw the three vital-sign channels in channel order.
pub fn vitals<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<Vec<f64>> {
    TUMOR_CHANNELS
        .iter()
        .map(|&(name, mean, sd)| {
            let mut series = ar1_series(rng, len, mean, sd, VITALS_AR);
            if name == "spo2" {
                series.iter_mut().for_each(|v| *v = v.min(100.0));
            }
            series
        })
        .collect()
}

fn noise<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    if sd == 0.0 {
        // Still consume a draw so noise levels do not shift later samples.
        let _: f64 = rng.sample(StandardNormal);
        0.0
    } else {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    }
}

fn generate_sine(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let series_t = spec.series_times();
    let times = spec.target_times();
    (0..spec.n_samples)
        .map(|id| {
            let a = rng.random_range(0.5..2.0);
            let b = rng.random_range(1.0..3.0);
            let c = rng.random_range(0.0..PI);
            let f = rng.random_range(0.5..2.0);
            let series = series_t
                .iter()
                .map(|&s| (2.0 * PI * f * s).sin() + noise(rng, spec.noise_std))
                .collect();
            let targets = times
                .iter()
                .map(|&t| sine_trajectory(a, b, c, f, t) + noise(rng, spec.noise_std))
                .collect();
            Sample {
                id,
                static_features: vec![a, b, c],
                dynamic: vec![series],
                times: times.clone(),
                targets,
            }
        })
        .collect()
}

fn generate_beta(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let times = spec.target_times();
    let scale = beta_walk_scale(spec.series_len);
    (0..spec.n_samples)
        .map(|id| {
            let p = rng.random_range(1.5..5.0);
            let q = rng.random_range(1.5..5.0);
            let drift = rng.random_range(-0.5..0.5);
            let mut walk = 0.0;
            let mut series = Vec::with_capacity(spec.series_len);
            series.push(0.0);
            for _ in 1..spec.series_len {
                walk += drift + 0.5 * rng.sample::<f64, _>(StandardNormal);
                series.push(walk / scale);
            }
            let mean = series.iter().sum::<f64>() / series.len() as f64;
            let targets = times
                .iter()
                .map(|&t| beta_shape(p, q, t) * (1.0 + 0.3 * mean) + noise(rng, spec.noise_std))
                .collect();
            Sample {
                id,
                static_features: vec![p, q],
                dynamic: vec![series],
                times: times.clone(),
                targets,
            }
        })
        .collect()
}

fn generate_tumor(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let times = spec.target_times();
    (0..spec.n_samples)
        .map(|id| {
            let v0 = rng.random_range(0.5..2.0);
            let g0 = rng.random_range(0.05..0.3);
            let d0 = rng.random_range(0.05..0.3);
            let age = rng.random_range(20.0..80.0);
            let channels = vitals(rng, spec.series_len);
            let static_features = vec![v0, g0, d0, age];
            let clean = tumor_trajectory(&static_features, &channels, &times);
            let targets = clean.iter().map(|y| y + noise(rng, spec.noise_std * v0)).collect();
            Sample {
                id,
                static_features,
                dynamic: channels,
                times: times.clone(),
                targets,
            }
        })
        .collect()
}

/// Generate the dataset described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples = match spec.name {
        DatasetName::Sine => generate_sine(spec, &mut rng),
        DatasetName::Beta => generate_beta(spec, &mut rng),
        DatasetName::Tumor => generate_tumor(spec, &mut rng),
    };
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Seeded shuffle followed by a contiguous split.
pub fn split(samples: &[Sample], ratios: [f64; 3], seed: u64) -> Result<Split, DatasetError> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(ratios));
    }
    let n = samples.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_val);
    for (size, name) in [(n_train, "train"), (n_val, "validation"), (n_test, "test")] {
        if size == 0 {
            return Err(DatasetError::EmptySplit { n, split: name });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| samples[i].clone()).collect();
    Ok(Split {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    generator_version: u32,
    spec: DatasetSpec,
}

impl Dataset {
    pub fn meta_json(&self) -> String {
        let meta = Meta {
            generator_version: GENERATOR_VERSION,
            spec: self.spec.clone(),
        };
        serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n"
    }

    /// Long-format CSV: `sample_id,kind,channel,time_index,value`.
    pub fn samples_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_id", "kind", "channel", "time_index", "value"]).expect("in-memory write");
        let mut row = |id: usize, kind: &str, channel: usize, index: usize, value: f64| {
            w.write_record([id.to_string(), kind.to_string(), channel.to_string(), index.to_string(), value.to_string()])
                .expect("in-memory write");
        };
        for s in &self.samples {
            for (c, v) in s.static_features.iter().enumerate() {
                row(s.id, "static", c, 0, *v);
            }
            for (c, series) in s.dynamic.iter().enumerate() {
                for (k, v) in series.iter().enumerate() {
                    row(s.id, "dynamic", c, k, *v);
                }
            }
            for (j, v) in s.targets.iter().enumerate() {
                row(s.id, "target", 0, j, *v);
            }
        }
        w.into_inner().expect("in-memory flush")
    }

    /// Hex SHA-256 over the serialized metadata and samples.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.meta_json().as_bytes());
        h.update(self.samples_csv());
        hex::encode(h.finalize())
    }

    /// Write `meta.json` and `samples.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.json"), self.meta_json())?;
        fs::write(dir.join("samples.csv"), self.samples_csv())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.generator_version != GENERATOR_VERSION {
            return Err(DatasetError::Malformed(format!(
                "generator version {} (expected {GENERATOR_VERSION})",
                meta.generator_version
            )));
        }
        let spec = meta.spec;
        spec.validate()?;
        let times = spec.target_times();
        let mut samples: Vec<Sample> = (0..spec.n_samples)
            .map(|id| Sample {
                id,
                static_features: vec![f64::NAN; spec.static_dim],
                dynamic: vec![vec![f64::NAN; spec.series_len]; spec.channels],
                times: times.clone(),
                targets: vec![f64::NAN; spec.target_len],
            })
            .collect();
        let mut reader = csv::Reader::from_path(dir.join("samples.csv"))?;
        let bad = |m: &str| DatasetError::Malformed(m.to_string());
        for record in reader.records() {
            let record = record?;
            if record.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            let parse = |i: usize| record[i].parse::<usize>().map_err(|_| bad("bad integer field"));
            let (id, channel, index) = (parse(0)?, parse(2)?, parse(3)?);
            let value: f64 = record[4].parse().map_err(|_| bad("bad value"))?;
            let sample = samples.get_mut(id).ok_or_else(|| bad("sample id out of range"))?;
            let slot = match &record[1] {
                "static" => sample.static_features.get_mut(channel),
                "dynamic" => sample.dynamic.get_mut(channel).and_then(|c| c.get_mut(index)),
                "target" => sample.targets.get_mut(index),
                _ => return Err(bad("unknown kind")),
            };
            *slot.ok_or_else(|| bad("index out of range"))? = value;
        }
        if let Some(s) = samples.iter().find(|s| !s.validate()) {
            return Err(DatasetError::Malformed(format!("sample {} is incomplete", s.id)));
        }
        Ok(Dataset { spec, samples })
    }
}
