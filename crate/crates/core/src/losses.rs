//! Training objective: two-level trajectory MSE, L2 on weight matrices and
//! an InfoNCE term aligning static and dynamic latents.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::splines::{BSplineBasis, SplineError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample {0} has no measurements")]
    EmptySample(usize),
    #[error("sample {index}: {predictions} predictions for {targets} targets")]
    LengthMismatch { index: usize, predictions: usize, targets: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("latent batches differ in shape: {0:?} vs {1:?}")]
    LatentShape(Vec<usize>, Vec<usize>),
    #[error("collapsed encoder: latent row {0} has zero norm")]
    ZeroNorm(usize),
    #[error(transparent)]
    Autodiff(AutodiffError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

impl From<AutodiffError> for LossError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::ZeroNormRow { row } => LossError::ZeroNorm(row),
            other => LossError::Autodiff(other),
        }
    }
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 0.1,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub l2: f64,
    pub contrastive: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn new(mse: f64, l2: f64, contrastive: f64, weights: LossWeights) -> Self {
        Self {
            mse,
            l2,
            contrastive,
            total: combine(mse, l2, contrastive, weights),
            alpha: weights.alpha,
            beta: weights.beta,
            tau: weights.tau,
        }
    }
}

/// `mse + α·l2 + β·contrastive`, in that order.
pub fn combine(mse: f64, l2: f64, contrastive: f64, w: LossWeights) -> f64 {
    mse + l2 * w.alpha + contrastive * w.beta
}

/// `(1/N) Σ_n (1/N_n) Σ_j (ŷ − y)²`.
pub fn trajectory_mse(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64, LossError> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(LossError::EmptyBatch);
    }
    let n = predictions.len() as f64;
    let mut total = 0.0;
    for (i, (p, y)) in predictions.iter().zip(targets).enumerate() {
        if y.is_empty() {
            return Err(LossError::EmptySample(i));
        }
        if p.len() != y.len() {
            return Err(LossError::LengthMismatch {
                index: i,
                predictions: p.len(),
                targets: y.len(),
            });
        }
        total += p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    }
    Ok(total / n)
}

/// Sum of squared weight-matrix entries.
pub fn l2_penalty(params: &ParamStore) -> f64 {
    params.l2_penalty()
}

/// Flattened measurement rows of a batch: one design row `φ(t_j)` per
/// measurement, the owning sample, and the weight `1/(N·N_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    design: Tensor,
    targets: Tensor,
    weights: Tensor,
    owner: Vec<usize>,
    samples: usize,
}

impl TargetBatch {
    pub fn new(basis: &BSplineBasis, times: &[&[f64]], targets: &[&[f64]]) -> Result<Self, LossError> {
        let n = times.len();
        if n == 0 || targets.len() != n {
            return Err(LossError::EmptyBatch);
        }
        let b = basis.len();
        let (mut design, mut ys, mut weights, mut owner) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, (t, y)) in times.iter().zip(targets).enumerate() {
            if y.is_empty() {
                return Err(LossError::EmptySample(i));
            }
            if t.len() != y.len() {
                return Err(LossError::LengthMismatch {
                    index: i,
                    predictions: t.len(),
                    targets: y.len(),
                });
            }
            let w = 1.0 / (n as f64 * y.len() as f64);
            for (&tj, &yj) in t.iter().zip(y.iter()) {
                design.extend(basis.eval(tj)?);
                ys.push(yj);
                weights.push(w);
                owner.push(i);
            }
        }
        let p = ys.len();
        Ok(Self {
            design: Tensor::matrix(p, b, design)?,
            targets: Tensor::vector(ys),
            weights: Tensor::vector(weights),
            owner,
            samples: n,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Record the two-level MSE of coefficients `m` (`N×B`).
    pub fn mse_tape(&self, tape: &Tape, m: Var) -> Result<Var, LossError> {
        let rows = tape.gather_rows(m, &self.owner)?;
        let design = tape.constant(self.design.clone());
        let pred = tape.row_sum(tape.mul(rows, design)?)?;
        let resid = tape.sub(pred, tape.constant(self.targets.clone()))?;
        let weighted = tape.mul(tape.mul(resid, resid)?, tape.constant(self.weights.clone()))?;
        Ok(tape.sum(weighted))
    }
}

/// Record the one-directional InfoNCE loss over rows of `h_s` and `h_d`.
pub fn contrastive_tape(tape: &Tape, h_s: Var, h_d: Var, tau: f64) -> Result<Var, LossError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    let (ss, sd) = (tape.shape(h_s), tape.shape(h_d));
    if ss != sd || ss.len() != 2 || ss[0] == 0 {
        return Err(LossError::LatentShape(ss, sd));
    }
    let a = tape.normalize_rows(h_s)?;
    let b = tape.normalize_rows(h_d)?;
    let sim = tape.scale(tape.matmul(a, tape.transpose(b)?)?, 1.0 / tau);
    let diagonal: Vec<usize> = (0..ss[0]).collect();
    Ok(tape.softmax_cross_entropy_rows(sim, &diagonal)?)
}

/// `L_c` for row-major latent batches.
pub fn contrastive_loss(h_s: &[Vec<f64>], h_d: &[Vec<f64>], tau: f64) -> Result<f64, LossError> {
    let to_tensor = |rows: &[Vec<f64>]| -> Result<Tensor, LossError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
            return Err(LossError::EmptyBatch);
        }
        Ok(Tensor::matrix(rows.len(), cols, rows.concat())?)
    };
    let tape = Tape::new();
    let a = tape.constant(to_tensor(h_s)?);
    let b = tape.constant(to_tensor(h_d)?);
    let out = contrastive_tape(&tape, a, b, tau)?;
    let v = tape.value(out).item();
    Ok(v)
}

/// Record `Σ w²` over decaying parameters bound as `vars`.
pub fn l2_tape(tape: &Tape, vars: &[Var], params: &ParamStore) -> Var {
    let mut terms = params
        .iter()
        .zip(vars)
        .filter(|(p, _)| p.decay)
        .map(|(_, &v)| tape.l2_norm_squared(v));
    let first = terms.next().unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    terms.fold(first, |acc, t| tape.add(acc, t).expect("scalars"))
}

/// Tape handles of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub mse: Var,
    pub l2: Var,
    pub contrastive: Option<Var>,
    pub total: Var,
}

impl ObjectiveVars {
    pub fn breakdown(&self, tape: &Tape, weights: LossWeights) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        let c = self.contrastive.map_or(0.0, v);
        LossBreakdown {
            mse: v(self.mse),
            l2: v(self.l2),
            contrastive: c,
            total: v(self.total),
            alpha: weights.alpha,
            beta: weights.beta,
            tau: weights.tau,
        }
    }
}

/// Record `mse + α·l2 + β·L_c`. The contrastive term is skipped entirely
/// when `β = 0`.
pub fn objective_tape(
    tape: &Tape,
    mse: Var,
    l2: Var,
    latents: Option<(Var, Var)>,
    weights: LossWeights,
) -> Result<ObjectiveVars, LossError> {
    let base = tape.add(mse, tape.scale(l2, weights.alpha))?;
    let (contrastive, total) = match latents {
        Some((h_s, h_d)) if weights.beta != 0.0 => {
            let c = contrastive_tape(tape, h_s, h_d, weights.tau)?;
            (Some(c), tape.add(base, tape.scale(c, weights.beta))?)
        }
        _ => (None, base),
    };
    Ok(ObjectiveVars {
        mse,
        l2,
        contrastive,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn mse_examples() {
        assert_eq!(trajectory_mse(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(trajectory_mse(&[vec![1.0, -1.0]], &[vec![0.0, 0.0]]).unwrap(), 1.0);
        assert!(trajectory_mse(&[], &[]).is_err());
    }

    #[test]
    fn mse_averages_per_sample_first() {
        let preds = vec![vec![1.0, 3.0], vec![0.0, 0.0, 0.0, 0.0, 2.0]];
        let targets = vec![vec![0.0, 0.0], vec![0.0; 5]];
        // Per-sample means 5 and 0.8, then their mean.
        let two_level = (5.0 + 0.8) / 2.0;
        let pooled = (1.0 + 9.0 + 4.0) / 7.0;
        let got = trajectory_mse(&preds, &targets).unwrap();
        assert!((got - two_level).abs() < 1e-15);
        assert!((got - pooled).abs() > 0.1);

        let basis = BSplineBasis::uniform(1.0, 2).unwrap();
        let times = [vec![0.1, 0.7], vec![0.0, 0.2, 0.4, 0.6, 1.0]];
        let ys = [vec![0.3, -1.0], vec![1.0, 2.0, 0.5, 0.0, -0.4]];
        let batch = TargetBatch::new(&basis, &[&times[0], &times[1]], &[&ys[0], &ys[1]]).unwrap();
        let m = [vec![0.1, 0.4, -0.3, 0.9, 1.2, -0.5], vec![1.0, 0.0, 2.0, 1.0, 0.5, 0.2]];
        let tape = Tape::new();
        let mv = tape.constant(Tensor::matrix(2, 6, m.concat()).unwrap());
        let out = batch.mse_tape(&tape, mv).unwrap();
        let preds: Vec<Vec<f64>> = m
            .iter()
            .zip(&times)
            .map(|(c, ts)| ts.iter().map(|&t| basis.eval(t).unwrap().iter().zip(c).map(|(p, c)| p * c).sum()).collect())
            .collect();
        let expected = trajectory_mse(&preds, &ys).unwrap();
        assert!((tape.value(out).item() - expected).abs() < 1e-14);
    }

    #[test]
    fn contrastive_closed_forms() {
        assert_eq!(contrastive_loss(&[vec![0.3, -2.0]], &[vec![5.0, 1.0]], 0.7).unwrap(), 0.0);
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let aligned = contrastive_loss(&e, &e, 1.0).unwrap();
        assert!((aligned - (1.0 + 1.0 / E).ln()).abs() < 1e-12);
        let swapped = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let misaligned = contrastive_loss(&e, &swapped, 1.0).unwrap();
        assert!((misaligned - (1.0 + E).ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_errors() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert!(matches!(contrastive_loss(&e, &e, 1.0), Err(LossError::ZeroNorm(1))));
        assert!(matches!(contrastive_loss(&e, &e, 0.0), Err(LossError::Temperature(_))));
    }

    #[test]
    fn temperature_monotonicity() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let swapped = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let losses: Vec<f64> = [2.0, 1.0, 0.5, 0.25, 0.1]
            .iter()
            .map(|&tau| contrastive_loss(&e, &swapped, tau).unwrap())
            .collect();
        assert!(losses.windows(2).all(|w| w[1] > w[0]), "{losses:?}");
    }

    #[test]
    fn contrastive_vanishes_with_alignment() {
        // Off-diagonal similarities stay 0 while the diagonal ones grow to 1.
        let hs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let tau = 0.05;
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let (a, b) = (k as f64 / 10.0, 1.0 - k as f64 / 10.0);
            let hd = vec![vec![a, 0.0, b], vec![0.0, a, b]];
            let l = contrastive_loss(&hs, &hd, tau).unwrap();
            let diag = a / (a * a + b * b).sqrt();
            assert!((l - (1.0 + (-diag / tau).exp()).ln()).abs() < 1e-12);
            assert!(l > 0.0 && l < last);
            last = l;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn l2_examples() {
        let mut p = ParamStore::new();
        assert_eq!(l2_penalty(&p), 0.0);
        p.add("w", Tensor::vector(vec![3.0]), true);
        p.add("b", Tensor::vector(vec![10.0]), false);
        assert_eq!(l2_penalty(&p), 9.0);
        let mut twice = p.clone();
        twice.add("w2", Tensor::vector(vec![3.0]), true);
        twice.add("b2", Tensor::vector(vec![10.0]), false);
        assert_eq!(l2_penalty(&twice), 2.0 * l2_penalty(&p));
        let tape = Tape::new();
        let vars = twice.bind(&tape);
        assert_eq!(tape.value(l2_tape(&tape, &vars, &twice)).item(), 18.0);
    }

    #[test]
    fn total_matches_breakdown_exactly() {
        let tape = Tape::new();
        let w = LossWeights {
            alpha: 3e-4,
            beta: 0.37,
            tau: 0.5,
        };
        let mse = tape.param(Tensor::scalar(0.123456789));
        let l2 = tape.param(Tensor::scalar(17.25));
        let hs = tape.param(Tensor::matrix(3, 2, vec![1.0, 0.2, -0.3, 0.8, 0.5, 0.5]).unwrap());
        let hd = tape.param(Tensor::matrix(3, 2, vec![0.9, 0.1, 0.2, 1.0, -0.4, 0.6]).unwrap());
        let obj = objective_tape(&tape, mse, l2, Some((hs, hd)), w).unwrap();
        let b = obj.breakdown(&tape, w);
        assert_eq!(b.total, combine(b.mse, b.l2, b.contrastive, w));
        assert_eq!(LossBreakdown::new(b.mse, b.l2, b.contrastive, w), b);

        let no_cl = LossWeights { beta: 0.0, ..w };
        let obj = objective_tape(&tape, mse, l2, Some((hs, hd)), no_cl).unwrap();
        let b = obj.breakdown(&tape, no_cl);
        assert_eq!(b.contrastive, 0.0);
        assert_eq!(b.total, combine(b.mse, b.l2, 0.0, no_cl));
    }

    fn rows(flat: &[f64], n: usize) -> Vec<Vec<f64>> {
        flat.chunks(flat.len() / n).map(<[f64]>::to_vec).collect()
    }

    proptest! {
        #[test]
        fn contrastive_positive_and_scale_invariant(
            hs in proptest::collection::vec(0.1f64..2.0, 12),
            hd in proptest::collection::vec(-2.0f64..2.0, 12),
            scales in proptest::collection::vec(0.01f64..100.0, 3),
            tau in 0.05f64..5.0,
        ) {
            let (hs, hd) = (rows(&hs, 3), rows(&hd, 3));
            prop_assume!(hd.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let base = contrastive_loss(&hs, &hd, tau).unwrap();
            prop_assert!(base > 0.0);
            let scaled: Vec<Vec<f64>> = hs.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
            let again = contrastive_loss(&scaled, &hd, tau).unwrap();
            prop_assert!((again - base).abs() <= 1e-12 * (1.0 + base));
        }
    }
}
