//! Monte Carlo sensitivity of predicted trajectories to Gaussian noise on the
//! exogenous series, and the raw-versus-trend comparison report.
//!
//! Sensitivity is measured in channel-std units: a perturbation of scale `σ`
//! adds `N(0, (σ·s_c)²)` to every time step of channel `c`, where `s_c` is the
//! model's training std for that channel, and the change in prediction is
//! divided by `σ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::Motif;
use crate::datasets::Sample;
use crate::encoding::{encode_channels, EncodingMode};
use crate::model::{ModelError, TimeviewDModel};

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("perturbation scale must be positive, got {0}")]
    Sigma(f64),
    #[error("need at least one draw, sample and probe time")]
    Empty,
    #[error("models were trained on different datasets ({raw} vs {trend})")]
    DatasetMismatch { raw: String, trend: String },
    #[error("non-finite sensitivity for sample {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that maps a sample's inputs to a trajectory.
pub trait Predictor: Sync {
    /// Per-channel scale of the perturbation; `σ` multiplies these.
    fn channel_scales(&self) -> Vec<f64>;

    fn predict(&self, x_static: &[f64], x_d: &[Vec<f64>], times: &[f64]) -> Result<Vec<f64>, ModelError>;
}

impl Predictor for TimeviewDModel {
    fn channel_scales(&self) -> Vec<f64> {
        self.card.stats.channels.iter().map(|c| c.std).collect()
    }

    fn predict(&self, x_static: &[f64], x_d: &[Vec<f64>], times: &[f64]) -> Result<Vec<f64>, ModelError> {
        let input = self.encode(x_d)?;
        self.predict_trajectory(x_static, &input, times)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    /// Noise scale in units of the per-channel training std.
    pub sigma: f64,
    pub draws: usize,
    /// Number of test samples probed.
    pub samples: usize,
    pub probe_points: usize,
    /// PASS when `R_trend / R_raw` is below this.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            draws: 50,
            samples: 20,
            probe_points: 50,
            threshold: 0.5,
            seed: 0,
        }
    }
}

/// `n` uniform points on `[0, horizon]`.
pub fn probe_times(horizon: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| horizon * i as f64 / (n - 1) as f64).collect(),
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn perturb(rng: &mut ChaCha8Rng, x_d: &[Vec<f64>], scales: &[f64], sigma: f64) -> Vec<Vec<f64>> {
    x_d.iter()
        .zip(scales)
        .map(|(series, &s)| {
            series
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + sigma * s * z
                })
                .collect()
        })
        .collect()
}

/// Sum in ascending order so the result does not depend on draw order.
fn sorted_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-sample mean over draws of `mean_t |ŷ_perturbed(t) − ŷ_base(t)| / σ`.
/// Sample `i` draws its noise from stream `i` of `seed`, so two predictors
/// probed with the same seed see identical perturbations.
pub fn sensitivity<P: Predictor + ?Sized>(
    model: &P,
    samples: &[Sample],
    sigma: f64,
    num_draws: usize,
    probe_times: &[f64],
    seed: u64,
) -> Result<Vec<f64>, RobustnessError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(RobustnessError::Sigma(sigma));
    }
    if num_draws == 0 || samples.is_empty() || probe_times.is_empty() {
        return Err(RobustnessError::Empty);
    }
    let scales = model.channel_scales();
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let base = model.predict(&s.static_features, &s.dynamic, probe_times)?;
            let mut rng = sample_rng(seed, i);
            let mut draws = Vec::with_capacity(num_draws);
            for _ in 0..num_draws {
                let x = perturb(&mut rng, &s.dynamic, &scales, sigma);
                let y = model.predict(&s.static_features, &x, probe_times)?;
                let diffs = y.iter().zip(&base).map(|(a, b)| (a - b).abs()).collect();
                draws.push(sorted_mean(diffs) / sigma);
            }
            let v = sorted_mean(draws);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(RobustnessError::NonFinite(i))
            }
        })
        .collect()
}

/// Fraction of draws whose perturbation changes the motif sequence of at
/// least one input channel under `model`'s encoder settings.
pub fn boundary_flip_frequency(
    model: &TimeviewDModel,
    samples: &[Sample],
    sigma: f64,
    num_draws: usize,
    seed: u64,
) -> Result<f64, RobustnessError> {
    let card = &model.card;
    let motifs = |x_d: &[Vec<f64>]| -> Result<Vec<Vec<Motif>>, ModelError> {
        let (_, enc) = encode_channels(x_d, EncodingMode::TrendsProperties, &card.encoding, &card.stats.channels)
            .map_err(ModelError::from)?;
        Ok(enc.iter().map(|e| e.composition.kinds()).collect())
    };
    let scales = model.channel_scales();
    let flips: Vec<usize> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let base = motifs(&s.dynamic)?;
            let mut rng = sample_rng(seed, i);
            let mut n = 0;
            for _ in 0..num_draws {
                let x = perturb(&mut rng, &s.dynamic, &scales, sigma);
                n += usize::from(motifs(&x)? != base);
            }
            Ok(n)
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(flips.iter().sum::<usize>() as f64 / (samples.len() * num_draws).max(1) as f64)
}

/// Mean and normal-approximation 95% half-width of per-sample values.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub r_raw: f64,
    pub r_trend: f64,
    /// `None` when `r_raw` is 0.
    pub ratio: Option<f64>,
    pub threshold: f64,
    pub pass: bool,
    pub ci_raw: f64,
    pub ci_trend: f64,
    pub raw_per_sample: Vec<f64>,
    pub trend_per_sample: Vec<f64>,
    pub sigma: f64,
    pub num_draws: usize,
    pub probe_points: usize,
    pub seed: u64,
    pub raw_mode: String,
    pub trend_mode: String,
    pub dataset_hash: String,
    /// Share of draws that changed an input motif sequence (diagnostic only).
    pub boundary_flip_frequency: f64,
}

impl SensitivityReport {
    pub fn summary(&self) -> String {
        let ratio = self.ratio.map_or("undefined".to_string(), |r| format!("{r:.4}"));
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        format!(
            "R_raw = {:.6} ± {:.6}, R_trend = {:.6} ± {:.6}\nratio = {ratio} (threshold {}) {verdict}",
            self.r_raw, self.ci_raw, self.r_trend, self.ci_trend, self.threshold
        )
    }
}

/// Sensitivity of both models on the same samples and noise draws.
pub fn compare(
    raw_model: &TimeviewDModel,
    trend_model: &TimeviewDModel,
    samples: &[Sample],
    config: &RobustnessConfig,
) -> Result<SensitivityReport, RobustnessError> {
    let (raw_hash, trend_hash) = (&raw_model.card.dataset_hash, &trend_model.card.dataset_hash);
    if raw_hash != trend_hash {
        return Err(RobustnessError::DatasetMismatch {
            raw: raw_hash.clone(),
            trend: trend_hash.clone(),
        });
    }
    let samples = &samples[..config.samples.min(samples.len())];
    let probes = probe_times(raw_model.card.horizon, config.probe_points);
    let raw = sensitivity(raw_model, samples, config.sigma, config.draws, &probes, config.seed)?;
    let trend = sensitivity(trend_model, samples, config.sigma, config.draws, &probes, config.seed)?;
    let (r_raw, ci_raw) = mean_ci(&raw);
    let (r_trend, ci_trend) = mean_ci(&trend);
    let ratio = (r_raw > 0.0).then(|| r_trend / r_raw);
    let flips = boundary_flip_frequency(trend_model, samples, config.sigma, config.draws, config.seed)?;
    Ok(SensitivityReport {
        r_raw,
        r_trend,
        ratio,
        threshold: config.threshold,
        pass: ratio.is_some_and(|r| r < config.threshold),
        ci_raw,
        ci_trend,
        raw_per_sample: raw,
        trend_per_sample: trend,
        sigma: config.sigma,
        num_draws: config.draws,
        probe_points: config.probe_points,
        seed: config.seed,
        raw_mode: raw_model.mode().to_string(),
        trend_mode: trend_model.mode().to_string(),
        dataset_hash: raw_hash.clone(),
        boundary_flip_frequency: flips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate, DatasetName, DatasetSpec};
    use crate::encoding::{EncodingConfig, InputStats};
    use crate::model::{Mode, ModelConfig};
    use std::f64::consts::PI;

    struct MeanOfSeries;

    impl Predictor for MeanOfSeries {
        fn channel_scales(&self) -> Vec<f64> {
            vec![1.0]
        }

        fn predict(&self, _: &[f64], x_d: &[Vec<f64>], times: &[f64]) -> Result<Vec<f64>, ModelError> {
            let m = x_d[0].iter().sum::<f64>() / x_d[0].len() as f64;
            Ok(vec![m; times.len()])
        }
    }

    fn sample(len: usize) -> Sample {
        Sample {
            id: 0,
            static_features: vec![],
            dynamic: vec![(0..len).map(|i| (i as f64 * 0.3).sin()).collect()],
            times: vec![0.0],
            targets: vec![0.0],
        }
    }

    fn model(mode: Mode, data: &crate::datasets::Dataset) -> TimeviewDModel {
        TimeviewDModel::new(
            mode,
            &ModelConfig {
                static_hidden: 8,
                recurrent_hidden: 8,
                ..ModelConfig::default()
            },
            data.spec.horizon,
            InputStats::from_samples(&data.samples),
            EncodingConfig::default(),
            7,
            data.content_hash(),
        )
        .unwrap()
    }

    #[test]
    fn mean_predictor_matches_half_normal_mean() {
        // Z̄ ~ N(0, σ²/t′) so E|Z̄|/σ = √(2/(π t′)).
        let len = 25;
        let samples = vec![sample(len); 40];
        let per = sensitivity(&MeanOfSeries, &samples, 0.3, 500, &[0.0, 0.5], 11).unwrap();
        let (est, _) = mean_ci(&per);
        let expected = (2.0 / (PI * len as f64)).sqrt();
        // sd of |Z| relative to its mean is √(π/2 − 1) ≈ 0.76; 20000 draws.
        let se = 0.76 * expected / (per.len() as f64 * 500.0).sqrt();
        assert!((est - expected).abs() < 5.0 * se, "{est} vs {expected}");
    }

    #[test]
    fn invalid_arguments() {
        let s = vec![sample(10)];
        assert!(matches!(sensitivity(&MeanOfSeries, &s, 0.0, 5, &[0.0], 0), Err(RobustnessError::Sigma(_))));
        assert!(matches!(sensitivity(&MeanOfSeries, &s, -1.0, 5, &[0.0], 0), Err(RobustnessError::Sigma(_))));
        assert!(matches!(sensitivity(&MeanOfSeries, &s, 0.1, 0, &[0.0], 0), Err(RobustnessError::Empty)));
    }

    #[test]
    fn zeroed_dynamic_branch_is_insensitive() {
        let data = generate(&DatasetSpec::new(DatasetName::Tumor, 12, 0)).unwrap();
        let mut raw = model(Mode::Raw, &data);
        raw.zero_params("dynamic.out");
        let probes = probe_times(1.0, 50);
        let per = sensitivity(&raw, &data.samples, 0.01, 5, &probes, 0).unwrap();
        assert!(per.iter().all(|&v| v == 0.0));

        let trend = model(Mode::TrendsProperties, &data);
        let cfg = RobustnessConfig {
            draws: 5,
            ..RobustnessConfig::default()
        };
        let report = compare(&raw, &trend, &data.samples[..4], &cfg).unwrap();
        assert_eq!(report.ratio, None);
        assert!(!report.pass);
        assert!(report.summary().contains("undefined"));
    }

    #[test]
    fn self_comparison_has_unit_ratio() {
        let data = generate(&DatasetSpec::new(DatasetName::Tumor, 12, 1)).unwrap();
        let raw = model(Mode::Raw, &data);
        let cfg = RobustnessConfig {
            draws: 5,
            ..RobustnessConfig::default()
        };
        let report = compare(&raw, &raw, &data.samples[..4], &cfg).unwrap();
        assert_eq!(report.ratio, Some(1.0));
        assert!(report.r_raw > 0.0);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<SensitivityReport>(&json).unwrap(), report);
    }

    #[test]
    fn mismatched_datasets_rejected() {
        let a = generate(&DatasetSpec::new(DatasetName::Tumor, 12, 1)).unwrap();
        let b = generate(&DatasetSpec::new(DatasetName::Tumor, 12, 2)).unwrap();
        let err = compare(&model(Mode::Raw, &a), &model(Mode::Trends, &b), &a.samples, &RobustnessConfig::default());
        assert!(matches!(err, Err(RobustnessError::DatasetMismatch { .. })));
    }

    #[test]
    fn raw_estimate_converges_as_sigma_shrinks() {
        let data = generate(&DatasetSpec::new(DatasetName::Tumor, 10, 3)).unwrap();
        let raw = model(Mode::Raw, &data);
        let probes = probe_times(1.0, 50);
        let a = mean_ci(&sensitivity(&raw, &data.samples, 0.01, 20, &probes, 5).unwrap()).0;
        let b = mean_ci(&sensitivity(&raw, &data.samples, 0.005, 20, &probes, 5).unwrap()).0;
        assert!((a - b).abs() < 0.1 * a, "{a} vs {b}");
    }

    #[test]
    fn unchanged_tokens_mean_unchanged_prediction() {
        let data = generate(&DatasetSpec::new(DatasetName::Sine, 10, 4)).unwrap();
        let trend = model(Mode::TrendsProperties, &data);
        let probes = probe_times(1.0, 20);
        let s = &data.samples[0];
        let mut rng = sample_rng(0, 0);
        let x = perturb(&mut rng, &s.dynamic, &trend.channel_scales(), 1e-30);
        assert_eq!(trend.encode(&x).unwrap(), trend.encode(&s.dynamic).unwrap());
        let per = sensitivity(&trend, &data.samples[..1], 1e-30, 3, &probes, 0).unwrap();
        assert_eq!(per, vec![0.0]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn draw_order_does_not_change_mean(mut v in proptest::collection::vec(0.0f64..10.0, 1..40), seed in 0u64..1000) {
            let a = sorted_mean(v.clone());
            use rand::seq::SliceRandom;
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert_eq!(a, sorted_mean(v));
        }
    }
}
