//! Composition maps: the motif sequence and transition points of a spline.
//!
//! Every knot interval of a cubic spline is a single cubic, so the roots of
//! its first (quadratic) and second (linear) derivatives are available in
//! closed form. Splitting at those roots yields pieces on which the sign
//! pattern `(sign y′, sign y″)` is constant; adjacent pieces of equal kind are
//! merged into maximal motifs.

use serde::{Deserialize, Serialize};

use crate::splines::{CubicPiece, SplineCurve};

/// Relative scale of the default derivative tolerance.
pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 1e-4;

/// Motifs shorter than this fraction of the horizon are absorbed into a neighbor.
pub const MIN_MOTIF_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motif {
    Constant,
    IncreasingConvex,
    IncreasingLinear,
    IncreasingConcave,
    DecreasingConvex,
    DecreasingLinear,
    DecreasingConcave,
}

impl Motif {
    pub const ALL: [Motif; 7] = [
        Motif::Constant,
        Motif::IncreasingConvex,
        Motif::IncreasingLinear,
        Motif::IncreasingConcave,
        Motif::DecreasingConvex,
        Motif::DecreasingLinear,
        Motif::DecreasingConcave,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Motif::Constant => "constant",
            Motif::IncreasingConvex => "increasing-convex",
            Motif::IncreasingLinear => "increasing-linear",
            Motif::IncreasingConcave => "increasing-concave",
            Motif::DecreasingConvex => "decreasing-convex",
            Motif::DecreasingLinear => "decreasing-linear",
            Motif::DecreasingConcave => "decreasing-concave",
        }
    }

    pub fn parse(name: &str) -> Option<Motif> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// +1 increasing, −1 decreasing, 0 constant.
    pub fn direction(self) -> i8 {
        match self {
            Motif::Constant => 0,
            Motif::IncreasingConvex | Motif::IncreasingLinear | Motif::IncreasingConcave => 1,
            _ => -1,
        }
    }

    /// +1 convex, −1 concave, 0 linear or constant.
    pub fn curvature(self) -> i8 {
        match self {
            Motif::IncreasingConvex | Motif::DecreasingConvex => 1,
            Motif::IncreasingConcave | Motif::DecreasingConcave => -1,
            _ => 0,
        }
    }
}

impl std::fmt::Display for Motif {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Motif implied by first and second derivative values, with `|·| < tol`
/// treated as zero.
pub fn classify_signs(d1: f64, d2: f64, tol: f64) -> Motif {
    if d1.abs() < tol {
        return Motif::Constant;
    }
    let increasing = d1 > 0.0;
    match (increasing, d2 > tol, d2 < -tol) {
        (true, true, _) => Motif::IncreasingConvex,
        (true, _, true) => Motif::IncreasingConcave,
        (true, _, _) => Motif::IncreasingLinear,
        (false, true, _) => Motif::DecreasingConvex,
        (false, _, true) => Motif::DecreasingConcave,
        (false, _, _) => Motif::DecreasingLinear,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionTag {
    LocalMax,
    LocalMin,
    Inflection,
    KnotBoundary,
    Endpoint,
}

impl TransitionTag {
    pub const ALL: [TransitionTag; 5] = [
        TransitionTag::LocalMax,
        TransitionTag::LocalMin,
        TransitionTag::Inflection,
        TransitionTag::KnotBoundary,
        TransitionTag::Endpoint,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionPoint {
    pub time: f64,
    pub value: f64,
    pub tag: TransitionTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotifSpan {
    pub kind: Motif,
    pub start: f64,
    pub end: f64,
}

impl MotifSpan {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionSource {
    PredictedTrajectory,
    ExogenousSeries,
}

/// Motif sequence plus transition points; serializes to the JSON emitted by
/// the `explain` and `whatif` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionMap {
    pub source: CompositionSource,
    pub horizon: f64,
    pub motifs: Vec<MotifSpan>,
    pub transitions: Vec<TransitionPoint>,
}

impl CompositionMap {
    pub fn kinds(&self) -> Vec<Motif> {
        self.motifs.iter().map(|m| m.kind).collect()
    }
}

/// Scale-aware zero threshold for derivative signs.
pub fn default_tolerance(curve: &SplineCurve) -> f64 {
    let max_abs = curve.coefficients().iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    // A flat curve has zero range; fall back to a tiny fraction of its level.
    let scale = curve.coefficient_range().max(1e-8 * max_abs).max(1e-12);
    DEFAULT_RELATIVE_TOLERANCE * scale
}

/// Real roots of `a·s² + b·s + c` strictly inside `(0, len)`.
fn quadratic_roots_in(a: f64, b: f64, c: f64, len: f64, out: &mut Vec<f64>) {
    let inside = |s: f64| s > 0.0 && s < len;
    if a == 0.0 {
        if b != 0.0 {
            let s = -c / b;
            if inside(s) {
                out.push(s);
            }
        }
        return;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut push = |s: f64| {
        if s.is_finite() && inside(s) {
            out.push(s);
        }
    };
    if q == 0.0 {
        // b == 0 and c == 0: double root at zero.
        push(0.0);
    } else {
        push(q / a);
        push(c / q);
    }
}

/// Split one cubic piece at the roots of y′ and y″ and classify the parts.
fn classify_piece(piece: &CubicPiece, tol: f64, out: &mut Vec<MotifSpan>) {
    let len = piece.end - piece.start;
    let [_, c1, c2, c3] = piece.coefficients;
    let mut cuts = Vec::with_capacity(5);
    quadratic_roots_in(3.0 * c3, 2.0 * c2, c1, len, &mut cuts);
    quadratic_roots_in(0.0, 6.0 * c3, 2.0 * c2, len, &mut cuts);
    cuts.push(0.0);
    cuts.push(len);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let (d1, d2) = (piece.first_derivative(mid), piece.second_derivative(mid));
        let kind = match classify_signs(d1, d2, tol) {
            // A sub-tolerance slope next to a clear extremum is not a flat stretch.
            Motif::Constant if d2.abs() >= tol && d1 != 0.0 => classify_signs(d1, d2, 0.0),
            kind => kind,
        };
        let end = if w[1] == len { piece.end } else { piece.start + w[1] };
        out.push(MotifSpan {
            kind,
            start: piece.start + w[0],
            end,
        });
    }
}

fn merge_equal_neighbors(spans: Vec<MotifSpan>) -> Vec<MotifSpan> {
    let mut merged: Vec<MotifSpan> = Vec::with_capacity(spans.len());
    for span in spans {
        match merged.last_mut() {
            Some(last) if last.kind == span.kind => last.end = span.end,
            _ => merged.push(span),
        }
    }
    merged
}

/// Absorb spans shorter than `min_len` into their longer neighbor, shortest
/// first, re-merging equal kinds after each absorption.
fn absorb_slivers(mut spans: Vec<MotifSpan>, min_len: f64) -> Vec<MotifSpan> {
    loop {
        spans = merge_equal_neighbors(spans);
        if spans.len() < 2 {
            return spans;
        }
        let Some((idx, _)) = spans
            .iter()
            .enumerate()
            .filter(|(_, s)| s.duration() < min_len)
            .min_by(|a, b| a.1.duration().total_cmp(&b.1.duration()))
        else {
            return spans;
        };
        let left = idx.checked_sub(1).map(|i| spans[i].duration());
        let right = spans.get(idx + 1).map(|s| s.duration());
        let into_left = match (left, right) {
            (Some(l), Some(r)) => l >= r,
            (Some(_), None) => true,
            _ => false,
        };
        let sliver = spans.remove(idx);
        if into_left {
            spans[idx - 1].end = sliver.end;
        } else {
            spans[idx].start = sliver.start;
        }
    }
}

fn boundary_tag(left: Motif, right: Motif, time: f64, knots: &[f64], horizon: f64) -> TransitionTag {
    match (left.direction(), right.direction()) {
        (1, -1) => return TransitionTag::LocalMax,
        (-1, 1) => return TransitionTag::LocalMin,
        _ => {}
    }
    if left.curvature() * right.curvature() == -1 {
        return TransitionTag::Inflection;
    }
    if knots.iter().any(|k| (k - time).abs() <= 1e-9 * horizon) {
        TransitionTag::KnotBoundary
    } else {
        TransitionTag::Inflection
    }
}

/// Motif sequence and transition points of `curve`.
pub fn extract_composition(curve: &SplineCurve, derivative_tolerance: f64) -> CompositionMap {
    extract_with_source(curve, derivative_tolerance, CompositionSource::PredictedTrajectory)
}

pub fn extract_with_source(curve: &SplineCurve, derivative_tolerance: f64, source: CompositionSource) -> CompositionMap {
    let basis = curve.basis();
    let horizon = basis.horizon();
    let mut spans = Vec::new();
    for piece in curve.pieces() {
        classify_piece(&piece, derivative_tolerance, &mut spans);
    }
    let motifs = absorb_slivers(spans, MIN_MOTIF_FRACTION * horizon);

    let value_at = |t: f64| curve.eval(t.clamp(0.0, horizon), 0).expect("time inside horizon");
    let mut transitions = Vec::with_capacity(motifs.len() + 1);
    transitions.push(TransitionPoint {
        time: 0.0,
        value: value_at(0.0),
        tag: TransitionTag::Endpoint,
    });
    for w in motifs.windows(2) {
        let time = w[0].end;
        transitions.push(TransitionPoint {
            time,
            value: value_at(time),
            tag: boundary_tag(w[0].kind, w[1].kind, time, basis.internal_knots(), horizon),
        });
    }
    transitions.push(TransitionPoint {
        time: horizon,
        value: value_at(horizon),
        tag: TransitionTag::Endpoint,
    });
    CompositionMap {
        source,
        horizon,
        motifs,
        transitions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::BSplineBasis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sign_table() {
        assert_eq!(classify_signs(0.0, 3.0, 1e-8), Motif::Constant);
        assert_eq!(classify_signs(2.0, -1.0, 1e-8), Motif::IncreasingConcave);
        assert_eq!(classify_signs(-0.5, 1e-12, 1e-8), Motif::DecreasingLinear);
        assert_eq!(classify_signs(1.0, 1.0, 1e-8), Motif::IncreasingConvex);
        assert_eq!(classify_signs(-1.0, -1.0, 1e-8), Motif::DecreasingConcave);
        assert_eq!(classify_signs(-1.0, 1.0, 1e-8), Motif::DecreasingConvex);
    }

    #[test]
    fn constant_curve_is_one_motif() {
        let basis = BSplineBasis::uniform(1.0, 5).unwrap();
        let curve = SplineCurve::new(basis, vec![5.0; 9]).unwrap();
        let map = extract_composition(&curve, default_tolerance(&curve));
        assert_eq!(map.kinds(), vec![Motif::Constant]);
        assert_eq!(map.transitions.len(), 2);
        assert!(map.transitions.iter().all(|t| t.tag == TransitionTag::Endpoint));
        assert_eq!((map.motifs[0].start, map.motifs[0].end), (0.0, 1.0));
    }

    #[test]
    fn fitted_line_is_increasing_linear() {
        let basis = BSplineBasis::uniform(1.0, 5).unwrap();
        let ts: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let curve = basis.fit(&ts, &ts, 0.0).unwrap();
        let map = extract_composition(&curve, default_tolerance(&curve));
        assert_eq!(map.kinds(), vec![Motif::IncreasingLinear]);
    }

    #[test]
    fn cubic_with_double_derivative_root() {
        // y = (t − 0.5)³ has y′ = 0 only at 0.5 (no sign change).
        let basis = BSplineBasis::uniform(1.0, 0).unwrap();
        let ts: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let ys: Vec<f64> = ts.iter().map(|t| (t - 0.5).powi(3)).collect();
        let curve = basis.fit(&ts, &ys, 0.0).unwrap();
        let map = extract_composition(&curve, default_tolerance(&curve));
        assert_eq!(map.kinds(), vec![Motif::IncreasingConcave, Motif::IncreasingConvex]);
        assert_eq!(map.transitions[1].tag, TransitionTag::Inflection);
    }

    #[test]
    fn sliver_absorption_prefers_longer_neighbor() {
        let s = |kind, start, end| MotifSpan { kind, start, end };
        let spans = vec![
            s(Motif::IncreasingConcave, 0.0, 0.4),
            s(Motif::Constant, 0.4, 0.4 + 1e-9),
            s(Motif::DecreasingConcave, 0.4 + 1e-9, 1.0),
        ];
        let out = absorb_slivers(spans, 1e-6);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].start, 0.4);
        assert_eq!(out[1].kind, Motif::DecreasingConcave);
    }

    #[test]
    fn map_invariants_on_random_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let knots = rng.random_range(0..8);
            let horizon = rng.random_range(0.5..4.0);
            let basis = BSplineBasis::uniform(horizon, knots).unwrap();
            let coeffs = (0..basis.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let curve = SplineCurve::new(basis, coeffs).unwrap();
            let map = extract_composition(&curve, default_tolerance(&curve));
            assert_eq!(map.transitions.len(), map.motifs.len() + 1);
            assert_eq!(map.motifs[0].start, 0.0);
            assert_eq!(map.motifs.last().unwrap().end, horizon);
            for w in map.motifs.windows(2) {
                assert_eq!(w[0].end, w[1].start);
                assert_ne!(w[0].kind, w[1].kind);
            }
            let total: f64 = map.motifs.iter().map(MotifSpan::duration).sum();
            assert!((total - horizon).abs() < 1e-12);
            for w in map.transitions.windows(2) {
                assert!(w[0].time < w[1].time);
            }
            let h = 1e-4 * horizon;
            for tp in &map.transitions {
                let y = |t: f64| curve.eval(t, 0).unwrap();
                match tp.tag {
                    TransitionTag::LocalMax => {
                        assert!(y(tp.time) >= y(tp.time - h) && y(tp.time) >= y(tp.time + h));
                    }
                    TransitionTag::LocalMin => {
                        assert!(y(tp.time) <= y(tp.time - h) && y(tp.time) <= y(tp.time + h));
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn json_schema_field_names() {
        let basis = BSplineBasis::uniform(1.0, 0).unwrap();
        let curve = SplineCurve::new(basis, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let map = extract_composition(&curve, default_tolerance(&curve));
        let json = serde_json::to_value(&map).unwrap();
        assert_eq!(json["source"], "predicted-trajectory");
        assert_eq!(json["horizon"], 1.0);
        assert_eq!(json["motifs"][0]["kind"], "increasing-linear");
        assert_eq!(json["transitions"][0]["tag"], "endpoint");
        let back: CompositionMap = serde_json::from_value(json).unwrap();
        assert_eq!(back, map);
    }

    proptest::proptest! {
        #[test]
        fn motifs_tile_the_horizon(coeffs in proptest::collection::vec(-2.0f64..2.0, 9)) {
            let curve = SplineCurve::new(BSplineBasis::uniform(3.0, 5).unwrap(), coeffs).unwrap();
            let map = extract_composition(&curve, default_tolerance(&curve));
            proptest::prop_assert!(!map.motifs.is_empty());
            proptest::prop_assert_eq!(map.motifs[0].start, 0.0);
            proptest::prop_assert_eq!(map.motifs.last().unwrap().end, 3.0);
            for w in map.motifs.windows(2) {
                proptest::prop_assert_eq!(w[0].end, w[1].start);
                proptest::prop_assert!(w[0].kind != w[1].kind);
            }
            proptest::prop_assert!(map.motifs.iter().all(|m| m.duration() > 0.0));
        }
    }
}
