//! Cubic B-spline bases on a closed horizon `[0, T]`.
//!
//! A [`BSplineBasis`] is a clamped cubic knot vector with equally spaced
//! internal knots. Basis values come from the Cox–de Boor triangular
//! recursion; curve derivatives use the coefficient-difference formula, so a
//! [`SplineCurve`] can hand out exact per-interval cubic polynomials to the
//! composition extractor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Polynomial degree of every basis in this crate.
pub const DEGREE: usize = 3;

/// Default ridge used when fitting discrete series.
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("internal knots must be sorted and lie strictly inside (0, {horizon})")]
    InvalidKnots { horizon: f64 },
    #[error("time {t} is outside the horizon [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error("derivative order {0} is not supported (max 2)")]
    DerivativeOrder(usize),
    #[error("expected {expected} coefficients, got {got}")]
    CoefficientCount { expected: usize, got: usize },
    #[error("times and values differ in length ({times} vs {values})")]
    LengthMismatch { times: usize, values: usize },
    #[error("{points} points cannot determine {basis} coefficients without a ridge")]
    Underdetermined { points: usize, basis: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("ridge must be non-negative and finite, got {0}")]
    InvalidRidge(f64),
    #[error("non-finite input value at index {0}")]
    NonFinite(usize),
}

/// Clamped cubic B-spline basis over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    horizon: f64,
    internal_knots: Vec<f64>,
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// Basis with `num_internal_knots` equally spaced knots inside `(0, horizon)`.
    pub fn uniform(horizon: f64, num_internal_knots: usize) -> Result<Self, SplineError> {
        let internal = (1..=num_internal_knots)
            .map(|i| horizon * i as f64 / (num_internal_knots + 1) as f64)
            .collect();
        Self::with_internal_knots(horizon, internal)
    }

    pub fn with_internal_knots(horizon: f64, internal_knots: Vec<f64>) -> Result<Self, SplineError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(SplineError::InvalidHorizon(horizon));
        }
        let inside = internal_knots.iter().all(|&k| k > 0.0 && k < horizon);
        let sorted = internal_knots.windows(2).all(|w| w[0] < w[1]);
        if !inside || !sorted {
            return Err(SplineError::InvalidKnots { horizon });
        }
        let mut knots = Vec::with_capacity(internal_knots.len() + 2 * (DEGREE + 1));
        knots.extend(std::iter::repeat_n(0.0, DEGREE + 1));
        knots.extend_from_slice(&internal_knots);
        knots.extend(std::iter::repeat_n(horizon, DEGREE + 1));
        Ok(Self {
            horizon,
            internal_knots,
            knots,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn internal_knots(&self) -> &[f64] {
        &self.internal_knots
    }

    /// The clamped knot vector (endpoints repeated `DEGREE + 1` times).
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions `B`.
    pub fn len(&self) -> usize {
        self.internal_knots.len() + DEGREE + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Breakpoints `0 = k_0 < k_1 < … < k_n = T` delimiting the cubic pieces.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.internal_knots.len() + 2);
        out.push(0.0);
        out.extend_from_slice(&self.internal_knots);
        out.push(self.horizon);
        out
    }

    fn check_time(&self, t: f64) -> Result<(), SplineError> {
        if t.is_finite() && (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(SplineError::OutOfRange {
                t,
                horizon: self.horizon,
            })
        }
    }

    /// `(φ_1(t), …, φ_B(t))`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, SplineError> {
        self.check_time(t)?;
        let mut out = vec![0.0; self.len()];
        let span = find_span(&self.knots, DEGREE, t);
        let mut local = [0.0; DEGREE + 1];
        basis_funs(&self.knots, DEGREE, span, t, &mut local);
        out[span - DEGREE..=span].copy_from_slice(&local);
        Ok(out)
    }

    /// Dense design matrix, one row per time.
    pub fn design_matrix(&self, times: &[f64]) -> Result<Vec<Vec<f64>>, SplineError> {
        times.iter().map(|&t| self.eval(t)).collect()
    }

    /// Least-squares fit minimizing `Σ (v_j − curve(t_j))² + ridge·‖c‖²`.
    pub fn fit(&self, times: &[f64], values: &[f64], ridge: f64) -> Result<SplineCurve, SplineError> {
        if times.len() != values.len() {
            return Err(SplineError::LengthMismatch {
                times: times.len(),
                values: values.len(),
            });
        }
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(SplineError::InvalidRidge(ridge));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SplineError::NonFinite(i));
        }
        let b = self.len();
        if ridge == 0.0 && times.len() < b {
            return Err(SplineError::Underdetermined {
                points: times.len(),
                basis: b,
            });
        }

        let (mut gram, rhs) = self.normal_equations(times, values)?;
        for i in 0..b {
            gram[(i, i)] += ridge;
        }
        let chol = factor(gram)?;
        let coefficients = chol.solve(&rhs).iter().copied().collect();
        SplineCurve::new(self.clone(), coefficients)
    }
}

impl BSplineBasis {
    fn normal_equations(&self, times: &[f64], values: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>), SplineError> {
        let b = self.len();
        let mut gram = DMatrix::<f64>::zeros(b, b);
        let mut rhs = DVector::<f64>::zeros(b);
        let mut local = [0.0; DEGREE + 1];
        for (&t, &v) in times.iter().zip(values) {
            self.check_time(t)?;
            let span = find_span(&self.knots, DEGREE, t);
            basis_funs(&self.knots, DEGREE, span, t, &mut local);
            let offset = span - DEGREE;
            for (i, &pi) in local.iter().enumerate() {
                rhs[offset + i] += pi * v;
                for (j, &pj) in local.iter().enumerate() {
                    gram[(offset + i, offset + j)] += pi * pj;
                }
            }
        }
        Ok((gram, rhs))
    }

    /// Standard deviation of the `order`-th derivative of an unregularized
    /// fit on `times`, at each point of `at`, per unit of i.i.d. observation
    /// noise.
    pub fn fit_noise_sd(&self, times: &[f64], at: &[f64], order: usize) -> Result<Vec<f64>, SplineError> {
        if order > 2 {
            return Err(SplineError::DerivativeOrder(order));
        }
        let b = self.len();
        if times.len() < b {
            return Err(SplineError::Underdetermined {
                points: times.len(),
                basis: b,
            });
        }
        let (gram, _) = self.normal_equations(times, &vec![0.0; times.len()])?;
        let chol = factor(gram)?;
        let units = (0..b)
            .map(|j| {
                let mut c = vec![0.0; b];
                c[j] = 1.0;
                SplineCurve::new(self.clone(), c)
            })
            .collect::<Result<Vec<_>, _>>()?;
        at.iter()
            .map(|&t| {
                self.check_time(t)?;
                let d = DVector::from_iterator(b, units.iter().map(|u| u.eval_unchecked(t, order)));
                Ok(d.dot(&chol.solve(&d)).max(0.0).sqrt())
            })
            .collect()
    }
}

/// Cholesky factor of a Gram matrix. Factorization succeeds on numerically
/// singular matrices with a vanishing pivot, so those are rejected explicitly.
fn factor(gram: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, SplineError> {
    let b = gram.nrows();
    let scale = (0..b).map(|i| gram[(i, i)]).fold(0.0_f64, f64::max);
    let chol = gram.cholesky().ok_or(SplineError::RankDeficient)?;
    let l = chol.l_dirty();
    let min_pivot = (0..b).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-13 * scale) {
        return Err(SplineError::RankDeficient);
    }
    Ok(chol)
}

/// Index `i` of the knot span with `knots[i] <= t < knots[i + 1]`; the last
/// non-empty span is used at the right endpoint.
fn find_span(knots: &[f64], degree: usize, t: f64) -> usize {
    let n = knots.len() - degree - 2;
    if t >= knots[n + 1] {
        return n;
    }
    if t <= knots[degree] {
        return degree;
    }
    let (mut lo, mut hi) = (degree, n + 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if t < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Non-zero basis values `N_{span-p..=span, p}(t)` by the triangular
/// Cox–de Boor scheme.
fn basis_funs(knots: &[f64], degree: usize, span: usize, t: f64, out: &mut [f64]) {
    let mut left = [0.0; DEGREE + 1];
    let mut right = [0.0; DEGREE + 1];
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = out[r] / denom;
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// Evaluate a degree-`degree` spline with the given knots and coefficients.
fn de_boor(knots: &[f64], coefficients: &[f64], degree: usize, t: f64) -> f64 {
    let span = find_span(knots, degree, t);
    let mut local = [0.0; DEGREE + 1];
    basis_funs(knots, degree, span, t, &mut local[..=degree]);
    local[..=degree]
        .iter()
        .zip(&coefficients[span - degree..=span])
        .map(|(b, c)| b * c)
        .sum()
}

/// Coefficients and knots of the derivative of a clamped spline.
fn differentiate(knots: &[f64], coefficients: &[f64], degree: usize) -> (Vec<f64>, Vec<f64>) {
    let p = degree as f64;
    let coeffs = coefficients
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let span = knots[i + degree + 1] - knots[i + 1];
            if span > 0.0 {
                p * (w[1] - w[0]) / span
            } else {
                0.0
            }
        })
        .collect();
    (knots[1..knots.len() - 1].to_vec(), coeffs)
}

/// Local cubic `y(a + s) = c0 + c1·s + c2·s² + c3·s³` on one knot interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicPiece {
    pub start: f64,
    pub end: f64,
    pub coefficients: [f64; 4],
}

impl CubicPiece {
    pub fn value(&self, s: f64) -> f64 {
        let [c0, c1, c2, c3] = self.coefficients;
        c0 + s * (c1 + s * (c2 + s * c3))
    }

    pub fn first_derivative(&self, s: f64) -> f64 {
        let [_, c1, c2, c3] = self.coefficients;
        c1 + s * (2.0 * c2 + 3.0 * c3 * s)
    }

    pub fn second_derivative(&self, s: f64) -> f64 {
        let [_, _, c2, c3] = self.coefficients;
        2.0 * c2 + 6.0 * c3 * s
    }
}

/// `curve(t) = Σ_b c_b φ_b(t)` for a fixed basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCurve {
    basis: BSplineBasis,
    coefficients: Vec<f64>,
    // (knots, coefficients) of the first three derivatives
    derivatives: [(Vec<f64>, Vec<f64>); 3],
}

impl SplineCurve {
    pub fn new(basis: BSplineBasis, coefficients: Vec<f64>) -> Result<Self, SplineError> {
        if coefficients.len() != basis.len() {
            return Err(SplineError::CoefficientCount {
                expected: basis.len(),
                got: coefficients.len(),
            });
        }
        let d1 = differentiate(basis.knots(), &coefficients, DEGREE);
        let d2 = differentiate(&d1.0, &d1.1, DEGREE - 1);
        let d3 = differentiate(&d2.0, &d2.1, DEGREE - 2);
        Ok(Self {
            basis,
            coefficients,
            derivatives: [d1, d2, d3],
        })
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Value (order 0) or first/second derivative at `t`.
    pub fn eval(&self, t: f64, derivative_order: usize) -> Result<f64, SplineError> {
        if derivative_order > 2 {
            return Err(SplineError::DerivativeOrder(derivative_order));
        }
        self.basis.check_time(t)?;
        Ok(self.eval_unchecked(t, derivative_order))
    }

    fn eval_unchecked(&self, t: f64, order: usize) -> f64 {
        if order == 0 {
            de_boor(self.basis.knots(), &self.coefficients, DEGREE, t)
        } else {
            let (knots, coeffs) = &self.derivatives[order - 1];
            de_boor(knots, coeffs, DEGREE - order, t)
        }
    }

    /// One cubic polynomial per non-degenerate knot interval, expanded
    /// around the interval's left end using right-continuous derivatives.
    pub fn pieces(&self) -> Vec<CubicPiece> {
        self.basis
            .breakpoints()
            .windows(2)
            .map(|w| {
                let a = w[0];
                let y0 = self.eval_unchecked(a, 0);
                let y1 = self.eval_unchecked(a, 1);
                let y2 = self.eval_unchecked(a, 2);
                let y3 = self.eval_unchecked(a, 3);
                CubicPiece {
                    start: a,
                    end: w[1],
                    coefficients: [y0, y1, y2 / 2.0, y3 / 6.0],
                }
            })
            .collect()
    }

    /// `max(c) − min(c)`.
    pub fn coefficient_range(&self) -> f64 {
        let (lo, hi) = self
            .coefficients
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
        hi - lo
    }
}
