//! The forecasting model: `m = h(x_s) + h_dynamic(x_d)` and
//! `ŷ(t) = Σ_b m_b φ_b(t)`.
//!
//! The static encoder is a tanh MLP. The dynamic encoder is one gated
//! recurrent cell shared by all channels; each channel's final state is
//! projected to `B` coefficients and the channel outputs are summed. Channel
//! sequences of a batch are stacked as rows, so one recurrent pass covers
//! every sample and channel, and padded steps leave the state untouched.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{orthogonal, read_checkpoint, write_checkpoint, xavier_uniform, AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::composition::{default_tolerance, extract_composition, CompositionMap};
use crate::datasets::Sample;
use crate::encoding::{multi_feature_encode, EncodedInput, EncodingConfig, EncodingError, EncodingMode, InputStats};
use crate::splines::{BSplineBasis, SplineCurve, SplineError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token width {got} does not match the trained cell ({expected})")]
    TokenWidth { expected: usize, got: usize },
    #[error("input was encoded as {got:?} but the model expects {expected:?}")]
    EncodingMode { expected: EncodingMode, got: EncodingMode },
    #[error("expected {expected} channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("expected {expected} static features, got {got}")]
    StaticDim { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model card: {0}")]
    Card(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Input configurations compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "trends")]
    Trends,
    #[serde(rename = "trends+properties")]
    TrendsProperties,
    #[serde(rename = "trends+properties+cl")]
    TrendsPropertiesCl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Raw, Mode::Trends, Mode::TrendsProperties, Mode::TrendsPropertiesCl];

    pub fn encoding(self) -> EncodingMode {
        match self {
            Mode::Raw => EncodingMode::Raw,
            Mode::Trends => EncodingMode::Trends,
            Mode::TrendsProperties | Mode::TrendsPropertiesCl => EncodingMode::TrendsProperties,
        }
    }

    pub fn contrastive(self) -> bool {
        self == Mode::TrendsPropertiesCl
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Raw => "raw",
            Mode::Trends => "trends",
            Mode::TrendsProperties => "trends+properties",
            Mode::TrendsPropertiesCl => "trends+properties+cl",
        }
    }

    /// Row label in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Raw => "TIMEVIEW + Raw Time Series",
            Mode::Trends => "TIMEVIEW + Trends",
            Mode::TrendsProperties => "TIMEVIEW + Trends and Properties",
            Mode::TrendsPropertiesCl => "TIMEVIEW + Trends and Properties + CL",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (valid: raw, trends, trends+properties, trends+properties+cl)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output spline coefficient count `B`.
    pub n_basis: usize,
    pub static_hidden: usize,
    pub recurrent_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_basis: 9,
            static_hidden: 64,
            recurrent_hidden: 32,
        }
    }
}

/// Everything needed to rebuild a model around its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub mode: Mode,
    pub n_basis: usize,
    pub horizon: f64,
    pub static_hidden: usize,
    pub recurrent_hidden: usize,
    pub static_dim: usize,
    pub channels: usize,
    pub token_width: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub stats: InputStats,
    pub encoding: EncodingConfig,
}

/// Latents of one forward pass, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub m: Vec<Vec<f64>>,
    pub h_s: Vec<Vec<f64>>,
    pub h_d: Vec<Vec<f64>>,
}

/// Tape handles of one forward pass, each `N×B`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub m: Var,
    pub h_s: Var,
    pub h_d: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeviewDModel {
    pub card: ModelCard,
    pub basis: BSplineBasis,
    pub params: ParamStore,
}

const STATIC_LAYERS: [&str; 3] = ["static.l0", "static.l1", "static.out"];

impl TimeviewDModel {
    /// Fresh model with seeded initialization.
    pub fn new(
        mode: Mode,
        config: &ModelConfig,
        horizon: f64,
        stats: InputStats,
        encoding: EncodingConfig,
        seed: u64,
        dataset_hash: String,
    ) -> Result<Self, ModelError> {
        if config.n_basis < 4 || config.static_hidden == 0 || config.recurrent_hidden == 0 {
            return Err(ModelError::Config(format!(
                "need n_basis ≥ 4 and positive hidden sizes, got {config:?}"
            )));
        }
        let static_dim = stats.static_features.len();
        let channels = stats.channels.len();
        if static_dim == 0 || channels == 0 {
            return Err(ModelError::Config("statistics carry no static features or no channels".into()));
        }
        let card = ModelCard {
            mode,
            n_basis: config.n_basis,
            horizon,
            static_hidden: config.static_hidden,
            recurrent_hidden: config.recurrent_hidden,
            static_dim,
            channels,
            token_width: mode.encoding().token_width(channels),
            seed,
            dataset_hash,
            stats,
            encoding,
        };
        let basis = BSplineBasis::uniform(horizon, config.n_basis - 4)?;
        let params = init_params(&card, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { card, basis, params })
    }

    pub fn mode(&self) -> Mode {
        self.card.mode
    }

    pub fn n_basis(&self) -> usize {
        self.card.n_basis
    }

    /// Encode one sample's exogenous series with the frozen statistics.
    pub fn encode(&self, x_d: &[Vec<f64>]) -> Result<EncodedInput, ModelError> {
        Ok(multi_feature_encode(x_d, self.card.mode.encoding(), &self.card.encoding, &self.card.stats.channels)?)
    }

    fn check_input(&self, x_s: &[f64], input: &EncodedInput) -> Result<(), ModelError> {
        let card = &self.card;
        if x_s.len() != card.static_dim {
            return Err(ModelError::StaticDim {
                expected: card.static_dim,
                got: x_s.len(),
            });
        }
        if input.mode != card.mode.encoding() {
            return Err(ModelError::EncodingMode {
                expected: card.mode.encoding(),
                got: input.mode,
            });
        }
        if input.channels.len() != card.channels {
            return Err(ModelError::Channels {
                expected: card.channels,
                got: input.channels.len(),
            });
        }
        if let Some(seq) = input.channels.iter().find(|s| s.width() != card.token_width) {
            return Err(ModelError::TokenWidth {
                expected: card.token_width,
                got: seq.width(),
            });
        }
        Ok(())
    }

    /// Record a batch forward pass on `tape`. `vars` are this model's
    /// parameters bound to the same tape, in store order.
    pub fn forward_tape(
        &self,
        tape: &Tape,
        vars: &[Var],
        x_static: &[&[f64]],
        inputs: &[&EncodedInput],
    ) -> Result<ForwardVars, ModelError> {
        let n = x_static.len();
        if n == 0 || inputs.len() != n {
            return Err(ModelError::EmptyBatch);
        }
        for (x, input) in x_static.iter().zip(inputs) {
            self.check_input(x, input)?;
        }
        let p = |name: &str| vars[self.params.position(name).expect("parameter exists")];

        let card = &self.card;
        let xs: Vec<f64> = x_static.iter().flat_map(|x| card.stats.normalize_static(x)).collect();
        let mut h = tape.constant(Tensor::matrix(n, card.static_dim, xs)?);
        for (i, layer) in STATIC_LAYERS.iter().enumerate() {
            h = tape.matmul(h, p(&format!("{layer}.w")))?;
            h = tape.add_row_vector(h, p(&format!("{layer}.b")))?;
            if i + 1 < STATIC_LAYERS.len() {
                h = tape.tanh(h);
            }
        }
        let h_s = h;
        let h_d = self.dynamic_tape(tape, &p, inputs)?;
        let m = tape.add(h_s, h_d)?;
        Ok(ForwardVars { m, h_s, h_d })
    }

    fn dynamic_tape(&self, tape: &Tape, p: &dyn Fn(&str) -> Var, inputs: &[&EncodedInput]) -> Result<Var, ModelError> {
        let card = &self.card;
        let (d, hid, w) = (card.channels, card.recurrent_hidden, card.token_width);
        let rows = inputs.len() * d;
        let sequences: Vec<_> = inputs.iter().flat_map(|inp| &inp.channels).collect();
        let steps = sequences.iter().map(|s| s.length).max().unwrap_or(0);

        let mut state = tape.constant(Tensor::zeros(vec![rows, hid]));
        if steps > 0 {
            // Input projections for every step at once, row `t·rows + r`.
            let mut x = Vec::with_capacity(steps * rows * w);
            for t in 0..steps {
                for seq in &sequences {
                    match seq.rows.get(t) {
                        Some(row) if t < seq.length => x.extend_from_slice(row),
                        _ => x.extend(std::iter::repeat_n(0.0, w)),
                    }
                }
            }
            let x = tape.constant(Tensor::matrix(steps * rows, w, x)?);
            let gi_all = tape.add_row_vector(tape.matmul(x, p("gru.w_input"))?, p("gru.b_input"))?;
            let (w_h, b_h) = (p("gru.w_hidden"), p("gru.b_hidden"));
            for t in 0..steps {
                let index: Vec<usize> = (t * rows..(t + 1) * rows).collect();
                let gi = tape.gather_rows(gi_all, &index)?;
                let gh = tape.add_row_vector(tape.matmul(state, w_h)?, b_h)?;
                let gate = |g: Var, k: usize| tape.slice_cols(g, k * hid, (k + 1) * hid);
                let r = tape.sigmoid(tape.add(gate(gi, 0)?, gate(gh, 0)?)?);
                let z = tape.sigmoid(tape.add(gate(gi, 1)?, gate(gh, 1)?)?);
                let cand = tape.tanh(tape.add(gate(gi, 2)?, tape.mul(r, gate(gh, 2)?)?)?);
                // h′ = n + z ⊙ (h − n)
                let next = tape.add(cand, tape.mul(z, tape.sub(state, cand)?)?)?;
                let active: Vec<bool> = sequences.iter().map(|s| t < s.length).collect();
                state = if active.iter().all(|&a| a) {
                    next
                } else {
                    let mask: Vec<f64> = active
                        .iter()
                        .flat_map(|&a| std::iter::repeat_n(if a { 1.0 } else { 0.0 }, hid))
                        .collect();
                    let mask = tape.constant(Tensor::matrix(rows, hid, mask)?);
                    tape.add(state, tape.mul(mask, tape.sub(next, state)?)?)?
                };
            }
        }
        let per_channel = tape.add_row_vector(tape.matmul(state, p("dynamic.out.w"))?, p("dynamic.out.b"))?;
        if d == 1 {
            return Ok(per_channel);
        }
        let owner: Vec<usize> = (0..rows).map(|r| r / d).collect();
        Ok(tape.scatter_add_rows(per_channel, &owner, inputs.len())?)
    }

    /// Inference pass over a batch.
    pub fn forward_batch(&self, x_static: &[&[f64]], inputs: &[&EncodedInput]) -> Result<Latents, ModelError> {
        let tape = Tape::new();
        let vars = self.params.bind_constant(&tape);
        let out = self.forward_tape(&tape, &vars, x_static, inputs)?;
        let rows = |v: Var| {
            let t = tape.value(v);
            (0..x_static.len()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>()
        };
        Ok(Latents {
            m: rows(out.m),
            h_s: rows(out.h_s),
            h_d: rows(out.h_d),
        })
    }

    /// `(m, h_s, h_d)` for one sample.
    pub fn forward(&self, x_s: &[f64], input: &EncodedInput) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ModelError> {
        let mut l = self.forward_batch(&[x_s], &[input])?;
        Ok((l.m.remove(0), l.h_s.remove(0), l.h_d.remove(0)))
    }

    /// `ŷ_j = Σ_b m_b φ_b(t_j)`.
    pub fn predict_trajectory(&self, x_s: &[f64], input: &EncodedInput, times: &[f64]) -> Result<Vec<f64>, ModelError> {
        let (m, _, _) = self.forward(x_s, input)?;
        evaluate(&self.basis, &m, times)
    }

    /// Encode `sample` and predict at its own measurement times.
    pub fn predict_sample(&self, sample: &Sample) -> Result<Vec<f64>, ModelError> {
        let input = self.encode(&sample.dynamic)?;
        self.predict_trajectory(&sample.static_features, &input, &sample.times)
    }

    pub fn explain_prediction(&self, x_s: &[f64], input: &EncodedInput) -> Result<CompositionMap, ModelError> {
        let (m, _, _) = self.forward(x_s, input)?;
        let curve = SplineCurve::new(self.basis.clone(), m)?;
        Ok(extract_composition(&curve, default_tolerance(&curve)))
    }

    /// Write `checkpoint.bin` and `model_card.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, ModelError> {
        fs::create_dir_all(dir)?;
        let ckpt = dir.join("checkpoint.bin");
        write_checkpoint(BufWriter::new(fs::File::create(&ckpt)?), &self.params)?;
        fs::write(dir.join("model_card.json"), serde_json::to_string_pretty(&self.card)? + "\n")?;
        Ok(ckpt)
    }

    /// Load a checkpoint and the model card stored beside it.
    pub fn load(checkpoint: &Path) -> Result<Self, ModelError> {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        let card_path = dir.join("model_card.json");
        let card: ModelCard = serde_json::from_str(
            &fs::read_to_string(&card_path).map_err(|e| ModelError::Card(format!("{}: {e}", card_path.display())))?,
        )?;
        let config = ModelConfig {
            n_basis: card.n_basis,
            static_hidden: card.static_hidden,
            recurrent_hidden: card.recurrent_hidden,
        };
        let mut model = TimeviewDModel::new(
            card.mode,
            &config,
            card.horizon,
            card.stats.clone(),
            card.encoding.clone(),
            card.seed,
            card.dataset_hash.clone(),
        )?;
        if model.card != card {
            return Err(ModelError::Card("inconsistent token width".into()));
        }
        let entries = read_checkpoint(BufReader::new(fs::File::open(checkpoint)?))?;
        model.params.load_entries(&entries)?;
        Ok(model)
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_params(&mut self, prefix: &str) {
        for i in 0..self.params.len() {
            if self.params.get(i).name.starts_with(prefix) {
                self.params.get_mut(i).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// `Σ_b m_b φ_b(t)` at each time.
pub fn evaluate(basis: &BSplineBasis, m: &[f64], times: &[f64]) -> Result<Vec<f64>, ModelError> {
    times
        .iter()
        .map(|&t| Ok(basis.eval(t)?.iter().zip(m).map(|(p, c)| p * c).sum()))
        .collect()
}

fn init_params(card: &ModelCard, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut params = ParamStore::new();
    let dims = [card.static_dim, card.static_hidden, card.static_hidden, card.n_basis];
    for (layer, io) in STATIC_LAYERS.iter().zip(dims.windows(2)) {
        params.add(format!("{layer}.w"), xavier_uniform(io[0], io[1], rng), true);
        params.add(format!("{layer}.b"), Tensor::vector(vec![0.0; io[1]]), false);
    }
    let h = card.recurrent_hidden;
    params.add("gru.w_input", xavier_uniform(card.token_width, 3 * h, rng), true);
    // Recurrent weights: one orthogonal block per gate, side by side.
    let blocks: Vec<Tensor> = (0..3).map(|_| orthogonal(h, rng)).collect();
    let mut w_h = Vec::with_capacity(3 * h * h);
    for i in 0..h {
        for b in &blocks {
            w_h.extend_from_slice(b.row(i));
        }
    }
    params.add("gru.w_hidden", Tensor::matrix(h, 3 * h, w_h).expect("shape"), true);
    params.add("gru.b_input", Tensor::vector(vec![0.0; 3 * h]), false);
    params.add("gru.b_hidden", Tensor::vector(vec![0.0; 3 * h]), false);
    params.add("dynamic.out.w", xavier_uniform(h, card.n_basis, rng), true);
    params.add("dynamic.out.b", Tensor::vector(vec![0.0; card.n_basis]), false);
    params
}
