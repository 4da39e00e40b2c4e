use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `build` with respect to each input.
fn check_gradients(inputs: Vec<Tensor>, build: impl Fn(&Tape, &[Var]) -> Var) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&tape, &vars);
    let grads = tape.backward(out).unwrap();

    let eval = |inputs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars);
        let v = tape.value(out).item();
        v
    };
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-4, "input {k} coord {j}: analytic {} numeric {numeric}", analytic[j]);
        }
    }
}

/// Reduce a matrix-valued op to a scalar with fixed random weights so every
/// output coordinate contributes a distinct gradient.
fn weighted(tape: &Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&shape, &mut rng));
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

#[test]
fn sum_backward_is_ones() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 5]);
}

#[test]
fn tanh_slope_at_zero() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.tanh(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 1.0);
}

#[test]
fn identity_and_square() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let g = tape.backward(x).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 1.0);

    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarOutput(_))));
}

#[test]
fn shape_mismatch_is_reported() {
    let tape = Tape::new();
    let a = tape.param(Tensor::zeros(vec![2, 3]));
    let b = tape.param(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(AutodiffError::Shape { .. })));
    let c = tape.param(Tensor::zeros(vec![3, 2]));
    assert!(tape.add(a, c).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let c = random_tensor(&[3, 4], &mut rng);
    let row = random_tensor(&[4], &mut rng);
    let positive = Tensor::matrix(3, 4, a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();

    check_gradients(vec![a.clone(), b.clone()], |t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        weighted(t, m, 10)
    });
    check_gradients(vec![a.clone(), c.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let p = t.mul(d, v[1]).unwrap();
        weighted(t, p, 11)
    });
    check_gradients(vec![a.clone(), row.clone()], |t, v| {
        let s = t.add_row_vector(v[0], v[1]).unwrap();
        weighted(t, s, 12)
    });
    check_gradients(vec![a.clone()], |t, v| {
        let parts = [t.tanh(v[0]), t.sigmoid(v[0]), t.exp(v[0]), t.scale(v[0], -2.5)];
        let cat = t.concat_cols(&parts).unwrap();
        weighted(t, cat, 13)
    });
    // Keep relu away from its kink.
    check_gradients(vec![positive.clone()], |t, v| {
        let shifted = t.scale(v[0], 1.0);
        let r = t.relu(shifted);
        let l = t.log(v[0]);
        let s = t.add(r, l).unwrap();
        weighted(t, s, 14)
    });
    check_gradients(vec![a.clone()], |t, v| {
        let s = t.sum(v[0]);
        let m = t.mean(v[0]);
        let q = t.l2_norm_squared(v[0]);
        let sm = t.mul(s, m).unwrap();
        t.add(sm, q).unwrap()
    });
    check_gradients(vec![a.clone()], |t, v| {
        let r = t.row_sum(v[0]).unwrap();
        let tr = t.transpose(v[0]).unwrap();
        let sl = t.slice_cols(tr, 1, 3).unwrap();
        let w1 = weighted(t, r, 15);
        let w2 = weighted(t, sl, 16);
        t.add(w1, w2).unwrap()
    });
    check_gradients(vec![a.clone()], |t, v| {
        let logits = t.slice_cols(v[0], 0, 3).unwrap();
        t.softmax_cross_entropy_rows(logits, &[2, 0, 1]).unwrap()
    });
    check_gradients(vec![a.clone()], |t, v| {
        let n = t.normalize_rows(v[0]).unwrap();
        weighted(t, n, 17)
    });
    check_gradients(vec![a.clone()], |t, v| {
        let g = t.gather_rows(v[0], &[2, 0, 2, 1, 1]).unwrap();
        let s = t.scatter_add_rows(g, &[0, 1, 0, 1, 1], 2).unwrap();
        weighted(t, s, 18)
    });
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&[5, 4], &mut rng);
    let w1 = random_tensor(&[4, 6], &mut rng);
    let b1 = random_tensor(&[6], &mut rng);
    let w2 = random_tensor(&[6, 6], &mut rng);
    let w3 = random_tensor(&[6, 3], &mut rng);
    let target = random_tensor(&[5, 3], &mut rng);
    check_gradients(vec![x, w1, b1, w2, w3], move |t, v| {
        let h1 = t.matmul(v[0], v[1]).unwrap();
        let h1 = t.add_row_vector(h1, v[2]).unwrap();
        let h1 = t.tanh(h1);
        let h2 = t.matmul(h1, v[3]).unwrap();
        let h2 = t.sigmoid(h2);
        let out = t.matmul(h2, v[4]).unwrap();
        let y = t.constant(target.clone());
        let r = t.sub(out, y).unwrap();
        let sq = t.l2_norm_squared(r);
        t.scale(sq, 0.5)
    });
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut params = ParamStore::new();
    params.add("w", Tensor::vector(vec![0.3, -0.7]), true);
    let mut opt = Adam::new(AdamConfig::default(), &params);
    opt.step(&mut params, &[vec![0.0, 0.0]]).unwrap();
    assert_eq!(params.get(0).value.data(), &[0.3, -0.7]);
    assert_eq!(opt.first_moments()[0], vec![0.0, 0.0]);
    assert_eq!(opt.second_moments()[0], vec![0.0, 0.0]);
}

#[test]
fn adam_constant_gradient_steps_by_lr() {
    let mut params = ParamStore::new();
    params.add("w", Tensor::vector(vec![0.0, 0.0]), true);
    let config = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(config, &params);
    let mut prev = params.get(0).value.data().to_vec();
    for step in 0..2000 {
        opt.step(&mut params, &[vec![2.5, -0.4]]).unwrap();
        let now = params.get(0).value.data().to_vec();
        if step > 10 {
            assert!(((prev[0] - now[0]) - 0.01).abs() < 1e-8);
            assert!(((now[1] - prev[1]) - 0.01).abs() < 1e-7);
        }
        prev = now;
    }
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut params = ParamStore::new();
    params.add("w", Tensor::vector(vec![1.0]), true);
    let mut opt = Adam::new(AdamConfig::default(), &params);
    let err = opt.step(&mut params, &[vec![f64::NAN]]).unwrap_err();
    assert_eq!(err, AutodiffError::NonFiniteGradient("w".into()));
    assert_eq!(opt.steps(), 0);
    assert_eq!(params.get(0).value.data(), &[1.0]);
}

#[test]
fn adam_quadratic_bowl_matches_scalar_recursion() {
    // Oracle: the textbook per-coordinate recursion written out by hand.
    fn oracle(mut w: f64, steps: usize) -> Vec<f64> {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }
    let start = [0.6, -0.8];
    let mut params = ParamStore::new();
    params.add("w", Tensor::vector(start.to_vec()), true);
    let config = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(config, &params);
    let traces: Vec<Vec<f64>> = start.iter().map(|&w| oracle(w, 500)).collect();
    for step in 0..500 {
        let w = params.get(0).value.data().to_vec();
        let grad = w.iter().map(|w| 2.0 * w).collect();
        opt.step(&mut params, &[grad]).unwrap();
        for (k, trace) in traces.iter().enumerate() {
            assert_eq!(params.get(0).value.data()[k], trace[step]);
        }
    }
    let norm = params.get(0).value.data().iter().map(|w| w * w).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "norm after 500 steps: {norm}");
}

#[test]
fn orthogonal_init_is_orthogonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = orthogonal(8, &mut rng);
    for i in 0..8 {
        for j in 0..8 {
            let dot: f64 = (0..8).map(|k| q.data()[k * 8 + i] * q.data()[k * 8 + j]).sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!((dot - expected).abs() < 1e-12);
        }
    }
    let x = xavier_uniform(10, 20, &mut rng);
    let bound = (6.0f64 / 30.0).sqrt();
    assert!(x.data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ParamStore::new();
    params.add("layer.w", random_tensor(&[3, 2], &mut rng), true);
    params.add("layer.b", random_tensor(&[2], &mut rng), false);
    params.add("scale", Tensor::scalar(-0.0), false);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &params).unwrap();
    assert_eq!(&bytes[..4], b"TVDC");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);

    let entries = read_checkpoint(bytes.as_slice()).unwrap();
    let mut restored = params.clone();
    restored.set_values(&[vec![0.0; 6], vec![0.0; 2], vec![1.0]]).unwrap();
    restored.load_entries(&entries).unwrap();
    assert_eq!(restored, params);
    assert!(restored.get(2).value.item().is_sign_negative());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(bad.as_slice()).is_err());
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());

    let mut other = ParamStore::new();
    other.add("different", random_tensor(&[3, 2], &mut rng), true);
    other.add("layer.b", random_tensor(&[2], &mut rng), false);
    other.add("scale", Tensor::scalar(0.0), false);
    assert!(other.load_entries(&entries).is_err());
}
