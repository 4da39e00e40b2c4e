//! Token encodings of exogenous series.
//!
//! A series is fitted with its own cubic spline, its composition is
//! extracted, and each motif becomes a trend token followed by a property
//! token describing the transition that closes it. Trend and property tokens
//! share one fixed-width row layout:
//!
//! | slots     | trend token      | property token        |
//! |-----------|------------------|-----------------------|
//! | `0..7`    | motif one-hot    | 0                     |
//! | `7`       | duration         | 0                     |
//! | `8`       | 0                | boundary time         |
//! | `9`       | 0                | z-scored value        |
//! | `10..15`  | 0                | transition-tag one-hot |
//!
//! followed by a one-hot of the channel index. The raw path emits
//! `(z-scored value, normalized time)` per step plus the same channel bits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{
    default_tolerance, extract_with_source, CompositionMap, CompositionSource, Motif, TransitionTag,
};
use crate::datasets::Sample;
use crate::splines::{BSplineBasis, SplineError};

pub const MOTIF_SLOTS: usize = 7;
pub const TAG_SLOTS: usize = 5;
pub const DURATION_SLOT: usize = 7;
pub const TIME_SLOT: usize = 8;
pub const VALUE_SLOT: usize = 9;
pub const TAG_OFFSET: usize = 10;
/// Width of a trend/property token before the channel one-hot.
pub const TREND_WIDTH: usize = 15;
/// Width of a raw token before the channel one-hot.
pub const RAW_WIDTH: usize = 2;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("series has {len} points but a fit with {knots} internal knots needs at least {needed}")]
    TooShort { len: usize, knots: usize, needed: usize },
    #[error("series contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("expected {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("channels have unequal lengths")]
    Ragged,
    #[error("interval {index} out of range ({count} trend tokens)")]
    Interval { index: usize, count: usize },
    #[error("counterfactual motif edits require a trend encoding")]
    RawEdit,
    #[error("invalid encoding config: {0}")]
    Config(String),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncodingMode {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "trends")]
    Trends,
    #[serde(rename = "trends+properties")]
    TrendsProperties,
}

impl EncodingMode {
    pub fn token_width(self, channels: usize) -> usize {
        match self {
            EncodingMode::Raw => RAW_WIDTH + channels,
            _ => TREND_WIDTH + channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    /// Internal knots of the input-series spline.
    pub knots: usize,
    /// Maximum token count per channel, trend and property tokens together.
    pub max_tokens: usize,
    pub past_window: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            knots: 5,
            max_tokens: 16,
            past_window: crate::datasets::PAST_WINDOW,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.max_tokens < 2 || !self.max_tokens.is_multiple_of(2) {
            return Err(EncodingError::Config(format!("max_tokens must be even and ≥ 2, got {}", self.max_tokens)));
        }
        if !(self.past_window.is_finite() && self.past_window > 0.0) {
            return Err(EncodingError::Config(format!("past_window must be positive, got {}", self.past_window)));
        }
        Ok(())
    }
}

/// Frozen per-feature normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats { mean: 0.0, std: 1.0 };

    /// Population mean and standard deviation; a degenerate spread maps to 1.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> ChannelStats {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for &v in values {
            n += 1;
            sum += v;
            sq += v * v;
        }
        if n == 0 {
            return Self::IDENTITY;
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        ChannelStats { mean, std }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Training-split statistics for static features and exogenous channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub static_features: Vec<ChannelStats>,
    pub channels: Vec<ChannelStats>,
}

impl InputStats {
    pub fn from_samples(train: &[Sample]) -> InputStats {
        let m = train.first().map_or(0, |s| s.static_features.len());
        let d = train.first().map_or(0, |s| s.dynamic.len());
        InputStats {
            static_features: (0..m).map(|i| ChannelStats::fit(train.iter().map(|s| &s.static_features[i]))).collect(),
            channels: (0..d).map(|c| ChannelStats::fit(train.iter().flat_map(|s| &s.dynamic[c]))).collect(),
        }
    }

    pub fn normalize_static(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.static_features).map(|(v, s)| s.normalize(*v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendToken {
    pub motif: Motif,
    /// Motif length over the past-window length.
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyToken {
    /// Boundary time over the past-window length.
    pub time: f64,
    /// Curve value at the boundary, z-scored.
    pub value: f64,
    pub tag: TransitionTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Token {
    Trend(TrendToken),
    Property(PropertyToken),
}

impl Token {
    /// Row layout without channel bits.
    pub fn to_row(&self) -> [f64; TREND_WIDTH] {
        let mut row = [0.0; TREND_WIDTH];
        match self {
            Token::Trend(t) => {
                row[t.motif.index()] = 1.0;
                row[DURATION_SLOT] = t.duration;
            }
            Token::Property(p) => {
                row[TIME_SLOT] = p.time;
                row[VALUE_SLOT] = p.value;
                row[TAG_OFFSET + p.tag.index()] = 1.0;
            }
        }
        row
    }
}

/// `[I₁, P₁, …, I_N, P_N]` for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleavedEncoding {
    pub channel: usize,
    pub tokens: Vec<Token>,
    /// Composition of the fitted input spline, in original units.
    pub composition: CompositionMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawToken {
    pub value: f64,
    pub time: f64,
}

fn check_finite(series: &[f64]) -> Result<(), EncodingError> {
    match series.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(EncodingError::NonFinite(i)),
        None => Ok(()),
    }
}

fn normalized_times(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![0.0];
    }
    (0..len).map(|k| k as f64 / (len - 1) as f64).collect()
}

/// Fit, extract the composition, and interleave trend and property tokens.
pub fn encode_series(
    series: &[f64],
    past_window: f64,
    knots: usize,
    stats: ChannelStats,
) -> Result<InterleavedEncoding, EncodingError> {
    let needed = knots + 4;
    if series.len() < needed {
        return Err(EncodingError::TooShort {
            len: series.len(),
            knots,
            needed,
        });
    }
    check_finite(series)?;
    let basis = BSplineBasis::uniform(past_window, knots)?;
    let times: Vec<f64> = normalized_times(series.len()).iter().map(|u| u * past_window).collect();
    let curve = basis.fit(&times, series, 0.0)?;
    let composition = extract_with_source(&curve, default_tolerance(&curve), CompositionSource::ExogenousSeries);
    let mut tokens = Vec::with_capacity(2 * composition.motifs.len());
    for (span, boundary) in composition.motifs.iter().zip(&composition.transitions[1..]) {
        tokens.push(Token::Trend(TrendToken {
            motif: span.kind,
            duration: span.duration() / past_window,
        }));
        tokens.push(Token::Property(PropertyToken {
            time: boundary.time / past_window,
            value: stats.normalize(boundary.value),
            tag: boundary.tag,
        }));
    }
    Ok(InterleavedEncoding {
        channel: 0,
        tokens,
        composition,
    })
}

/// Whether every transition of the fitted series is resolvable under i.i.d.
/// observation noise of standard deviation `noise_sd`.
///
/// Resolvable means: wherever `|y′|` or `|y″|` is within six noise standard
/// deviations (or ten derivative tolerances) of zero, a transversal sign change
/// lies within 2% of the window; every root's noise-induced shift, six-sigma,
/// moves neither its time nor its value by more than 1% of window or range;
/// and neighboring roots and endpoints stay further apart than their combined
/// shifts. Series outside this regime sit near a motif boundary, where a
/// small perturbation can legitimately change the composition.
pub fn transitions_resolvable(series: &[f64], past_window: f64, knots: usize, noise_sd: f64) -> Result<bool, EncodingError> {
    const DENSE: usize = 4000;
    const SIGMAS: f64 = 6.0;
    check_finite(series)?;
    let basis = BSplineBasis::uniform(past_window, knots)?;
    let times: Vec<f64> = normalized_times(series.len()).iter().map(|u| u * past_window).collect();
    let curve = basis.fit(&times, series, 0.0)?;
    let tol = default_tolerance(&curve);
    let range = series.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - series.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if range <= 0.0 {
        return Ok(false);
    }
    let dense: Vec<f64> = (0..=DENSE).map(|i| past_window * i as f64 / DENSE as f64).collect();
    let window = DENSE / 50;
    let mut marks: Vec<(f64, f64)> = vec![(0.0, 0.0), (past_window, 0.0)];
    for order in 1..=2 {
        let sd = basis.fit_noise_sd(&times, &dense, order)?;
        let g: Vec<f64> = dense.iter().map(|&t| curve.eval(t, order)).collect::<Result<_, _>>()?;
        let crosses = |i: usize| g[i].signum() != g[i + 1].signum();
        for i in 0..=DENSE {
            if g[i].abs() <= (SIGMAS * noise_sd * sd[i]).max(10.0 * tol) && !(i.saturating_sub(window)..(i + window).min(DENSE)).any(crosses) {
                return Ok(false);
            }
        }
        for i in (0..DENSE).filter(|&i| crosses(i)) {
            let root = dense[i] - g[i] * (dense[i + 1] - dense[i]) / (g[i + 1] - g[i]);
            let slope = if order == 1 {
                curve.eval(root, 2)?
            } else {
                let h = 1e-4 * past_window;
                let (a, b) = ((root - h).max(0.0), (root + h).min(past_window));
                (curve.eval(b, 2)? - curve.eval(a, 2)?) / (b - a)
            };
            let shift = noise_sd * sd[i] / slope.abs();
            let steepness = curve.eval(root, 1)?.abs() * past_window / range;
            if !(SIGMAS * shift / past_window * steepness.max(1.0) <= 0.01) {
                return Ok(false);
            }
            marks.push((root, shift));
        }
    }
    marks.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(marks
        .windows(2)
        .all(|w| w[1].0 - w[0].0 > SIGMAS * (w[0].1 + w[1].1) + 0.01 * past_window))
}

/// One `(z-value, normalized time)` token per step.
pub fn encode_raw(series: &[f64], stats: ChannelStats) -> Result<Vec<RawToken>, EncodingError> {
    check_finite(series)?;
    Ok(series
        .iter()
        .zip(normalized_times(series.len()))
        .map(|(&v, time)| RawToken {
            value: stats.normalize(v),
            time,
        })
        .collect())
}

pub fn decode_raw(tokens: &[RawToken], stats: ChannelStats) -> Vec<f64> {
    tokens.iter().map(|t| stats.denormalize(t.value)).collect()
}

/// Padded token rows for one channel, ready for the recurrent encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub rows: Vec<Vec<f64>>,
    /// Rows past this index are padding.
    pub length: usize,
}

impl TokenSequence {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Number of trend tokens within the true length.
    pub fn trend_count(&self) -> usize {
        self.length.div_ceil(2)
    }

    /// Replace the motif of the `interval`-th trend token.
    pub fn set_trend_motif(&mut self, interval: usize, motif: Motif) -> Result<(), EncodingError> {
        let count = self.trend_count();
        if interval >= count {
            return Err(EncodingError::Interval { index: interval, count });
        }
        let row = &mut self.rows[2 * interval];
        row[..MOTIF_SLOTS].iter_mut().for_each(|v| *v = 0.0);
        row[motif.index()] = 1.0;
        Ok(())
    }
}

/// All channels of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub mode: EncodingMode,
    pub channels: Vec<TokenSequence>,
}

impl EncodedInput {
    pub fn set_trend_motif(&mut self, channel: usize, interval: usize, motif: Motif) -> Result<(), EncodingError> {
        if self.mode == EncodingMode::Raw {
            return Err(EncodingError::RawEdit);
        }
        let count = self.channels.len();
        self.channels
            .get_mut(channel)
            .ok_or(EncodingError::ChannelCount {
                expected: count,
                got: channel + 1,
            })?
            .set_trend_motif(interval, motif)
    }
}

fn with_channel_bits(row: &[f64], channel: usize, channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len() + channels);
    out.extend_from_slice(row);
    out.extend((0..channels).map(|c| if c == channel { 1.0 } else { 0.0 }));
    out
}

/// Encode every channel of `x_d` (one series per channel) in `mode`.
pub fn multi_feature_encode(
    x_d: &[Vec<f64>],
    mode: EncodingMode,
    config: &EncodingConfig,
    stats: &[ChannelStats],
) -> Result<EncodedInput, EncodingError> {
    Ok(EncodedInput {
        mode,
        channels: encode_channels(x_d, mode, config, stats)?.0,
    })
}

/// Like [`multi_feature_encode`], also returning the per-channel interleaved
/// encodings (empty in raw mode).
pub fn encode_channels(
    x_d: &[Vec<f64>],
    mode: EncodingMode,
    config: &EncodingConfig,
    stats: &[ChannelStats],
) -> Result<(Vec<TokenSequence>, Vec<InterleavedEncoding>), EncodingError> {
    config.validate()?;
    let d = x_d.len();
    if d == 0 || stats.len() != d {
        return Err(EncodingError::ChannelCount {
            expected: stats.len(),
            got: d,
        });
    }
    if x_d.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(EncodingError::Ragged);
    }
    let mut sequences = Vec::with_capacity(d);
    let mut encodings = Vec::new();
    for (c, (series, &st)) in x_d.iter().zip(stats).enumerate() {
        match mode {
            EncodingMode::Raw => {
                let rows = encode_raw(series, st)?
                    .iter()
                    .map(|t| with_channel_bits(&[t.value, t.time], c, d))
                    .collect::<Vec<_>>();
                let length = rows.len();
                sequences.push(TokenSequence { rows, length });
            }
            EncodingMode::Trends | EncodingMode::TrendsProperties => {
                let mut enc = encode_series(series, config.past_window, config.knots, st)?;
                enc.channel = c;
                let skip = enc.tokens.len().saturating_sub(config.max_tokens);
                let mut rows: Vec<Vec<f64>> = enc.tokens[skip..]
                    .iter()
                    .map(|tok| {
                        let row = match (mode, tok) {
                            (EncodingMode::Trends, Token::Property(_)) => [0.0; TREND_WIDTH],
                            _ => tok.to_row(),
                        };
                        with_channel_bits(&row, c, d)
                    })
                    .collect();
                let length = rows.len();
                rows.resize(config.max_tokens, vec![0.0; TREND_WIDTH + d]);
                sequences.push(TokenSequence { rows, length });
                encodings.push(enc);
            }
        }
    }
    Ok((sequences, encodings))
}
