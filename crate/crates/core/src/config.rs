//! File-based experiment configuration (TOML). Every key is optional and
//! defaults to the library default; unknown keys are rejected.
//!
//! ```toml
//! runs_dir = "runs"
//!
//! [dataset]
//! name = "d-sine"
//! n_samples = 500
//! seed = 0
//! # path = "data/d-sine"   # load instead of generating
//!
//! [train]
//! mode = "trends+properties"
//! epochs = 2000
//!
//! [ablation]
//! datasets = ["d-sine", "d-beta", "d-tumor"]
//! seeds = [0, 1, 2, 3, 4]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{generate, Dataset, DatasetError, DatasetName, DatasetSpec};
use crate::encoding::EncodingConfig;
use crate::model::{Mode, ModelConfig};
use crate::robustness::RobustnessConfig;
use crate::training::{RunConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub name: DatasetName,
    pub n_samples: usize,
    pub seed: u64,
    /// Observation noise sd; the dataset's default when absent.
    pub noise_std: Option<f64>,
    /// Load a saved dataset from this directory instead of generating one.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            name: DatasetName::Sine,
            n_samples: 500,
            seed: 0,
            noise_std: None,
            path: None,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self, name: DatasetName) -> DatasetSpec {
        let spec = DatasetSpec::new(name, self.n_samples, self.seed);
        match self.noise_std {
            Some(sd) => spec.with_noise(sd),
            None => spec,
        }
    }

    /// Load from `path` (relative to `base`) or generate.
    pub fn resolve(&self, base: &Path) -> Result<Dataset, DatasetError> {
        match &self.path {
            Some(p) => Dataset::load(&base.join(p)),
            None => generate(&self.spec(self.name)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub datasets: Vec<DatasetName>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// Pool size; the worker environment variable or the core count when absent.
    pub workers: Option<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            datasets: DatasetName::ALL.to_vec(),
            modes: Mode::ALL.to_vec(),
            seeds: (0..5).collect(),
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub runs_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub encoding: EncodingConfig,
    pub robustness: RobustnessConfig,
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn run_config(&self, dataset: &Dataset) -> RunConfig {
        RunConfig {
            dataset: dataset.spec.clone(),
            train: self.train.clone(),
            model: self.model.clone(),
            encoding: self.encoding.clone(),
        }
    }

    pub fn runs_dir(&self, base: &Path) -> PathBuf {
        base.join(self.runs_dir.as_deref().unwrap_or(Path::new("runs")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.epochs, 2000);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.robustness.sigma, 0.01);
        assert_eq!(c.ablation.seeds.len(), 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse("epochs = 3").is_err());
        assert!(ExperimentConfig::parse("[train]\nepoch = 3").is_err());
        assert!(ExperimentConfig::parse("[dataset]\nname = \"d-cosine\"").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::parse(
            "[dataset]\nname = \"d-tumor\"\nn_samples = 40\nnoise_std = 0.01\n[train]\nmode = \"raw\"\nlr = 0.01\n[ablation]\nseeds = [3]\n",
        )
        .unwrap();
        assert_eq!(c.dataset.name, DatasetName::Tumor);
        assert_eq!(c.train.mode, Mode::Raw);
        assert_eq!(c.dataset.spec(DatasetName::Tumor).noise_std, 0.01);
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
