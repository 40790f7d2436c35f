use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(i, p) * b.get(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (random(2, 3, 1), random(3, 4, 2));
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    assert_eq!(t.value(c).shape(), [2, 4]);
    for (x, y) in t.value(c).data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn matmul_rejects_bad_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(2, 3));
    let b = t.constant(Tensor::zeros(2, 3));
    assert!(matches!(t.matmul(a, b), Err(crate::Error::Shape { .. })));
}

#[test]
fn elementary_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![0.0, -3.0]));
    let th = t.tanh(x);
    let r = t.relu(x);
    assert_eq!(t.value(th).data()[0], 0.0);
    assert_eq!(t.value(r).data()[1], 0.0);
    let c = t.constant(Tensor::full(1, 5, 2.5));
    let s = t.softmax_rows(c);
    for v in t.value(s).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn sum_and_half_square_gradients() {
    let x = random(3, 2, 5);
    let mut store = ParamStore::new();
    let mut t = Tape::new();
    let vx = t.input(x.clone());
    let s = t.sum(vx);
    let g = t.backward(s, &mut store).unwrap();
    assert!(g.get(vx).unwrap().data().iter().all(|&v| v == 1.0));

    let mut t = Tape::new();
    let vx = t.input(x.clone());
    let sq = t.mul(vx, vx).unwrap();
    let s = t.sum(sq);
    let l = t.scale(s, 0.5);
    let g = t.backward(l, &mut store).unwrap();
    assert_eq!(g.get(vx).unwrap().data(), x.data());
}

#[test]
fn backward_requires_scalar() {
    let mut store = ParamStore::new();
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(2, 2));
    assert!(t.backward(x, &mut store).is_err());
}

#[test]
fn backward_twice_doubles_parameter_gradients() {
    let mut store = ParamStore::new();
    let w = store.add("w", random(2, 2, 3));
    let mut t = Tape::new();
    let vw = t.param(&store, w);
    let th = t.tanh(vw);
    let l = t.sum(th);
    t.backward(l, &mut store).unwrap();
    let once = store.get(w).grad.clone();
    t.backward(l, &mut store).unwrap();
    for (a, b) in store.get(w).grad.data().iter().zip(once.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn frozen_parameters_receive_nothing() {
    let mut store = ParamStore::new();
    let w = store.add("w", random(2, 2, 3));
    store.set_trainable(|_| false);
    let mut t = Tape::new();
    let vw = t.param(&store, w);
    let l = t.sum(vw);
    t.backward(l, &mut store).unwrap();
    assert!(store.get(w).grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let a = t.constant(random(4, 5, 11));
        let b = t.constant(random(5, 3, 12));
        let c = t.matmul(a, b).unwrap();
        let s = t.softmax_rows(c);
        t.value(s).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn batch_norm_train_normalizes() {
    let mut t = Tape::new();
    let x = t.constant(random(7, 3, 9));
    let g = t.constant(Tensor::full(1, 3, 1.0));
    let b = t.constant(Tensor::zeros(1, 3));
    let (y, stats) = t.batch_norm(x, g, b, BnMode::Train { eps: 1e-5 }).unwrap();
    assert!(stats.is_some());
    let y = t.value(y);
    for c in 0..3 {
        let col: Vec<f64> = (0..7).map(|r| y.get(r, c)).collect();
        let mean = col.iter().sum::<f64>() / 7.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn batch_norm_unit_eps_limit() {
    // With ε → 0 the variance is exactly 1; with ε = 1e-5 it is var/(var+ε).
    let mut t = Tape::new();
    let x = t.constant(random(9, 2, 4));
    let g = t.constant(Tensor::full(1, 2, 1.0));
    let b = t.constant(Tensor::zeros(1, 2));
    let (y, _) = t.batch_norm(x, g, b, BnMode::Train { eps: 0.0 }).unwrap();
    let y = t.value(y);
    for c in 0..2 {
        let var = (0..9).map(|r| y.get(r, c).powi(2)).sum::<f64>() / 9.0;
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_eval_identity() {
    let x = random(3, 4, 2);
    let mut t = Tape::new();
    let vx = t.constant(x.clone());
    let g = t.constant(Tensor::full(1, 4, 1.0));
    let b = t.constant(Tensor::zeros(1, 4));
    let (mean, var) = (vec![0.0; 4], vec![1.0; 4]);
    let (y, stats) = t
        .batch_norm(vx, g, b, BnMode::Eval { mean: &mean, var: &var, eps: 0.0 })
        .unwrap();
    assert!(stats.is_none());
    assert_eq!(t.value(y), &x);
}

#[test]
fn batch_norm_rejects_single_row_in_train() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(1, 2));
    let g = t.constant(Tensor::full(1, 2, 1.0));
    let b = t.constant(Tensor::zeros(1, 2));
    assert!(t.batch_norm(x, g, b, BnMode::Train { eps: 1e-5 }).is_err());
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn grad_check_linear_is_exact() {
    let mut store = ParamStore::new();
    let w = store.add("w", random(3, 2, 1));
    let x = random(4, 3, 2);
    let r = grad_check(&mut store, opts(), |t, s| {
        let vx = t.constant(x.clone());
        let vw = t.param(s, w);
        let y = t.matmul(vx, vw)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
}

#[test]
fn grad_check_tanh_network() {
    let mut store = ParamStore::new();
    let w1 = store.add("w1", random(3, 5, 1));
    let b1 = store.add("b1", random(1, 5, 2));
    let w2 = store.add("w2", random(5, 2, 3));
    let x = random(6, 3, 4);
    let r = grad_check(&mut store, opts(), |t, s| {
        let vx = t.constant(x.clone());
        let (vw1, vb1, vw2) = (t.param(s, w1), t.param(s, b1), t.param(s, w2));
        let h = t.matmul(vx, vw1)?;
        let h = t.add(h, vb1)?;
        let h = t.tanh(h);
        let y = t.matmul(h, vw2)?;
        let y = t.tanh(y);
        let y = t.mul(y, y)?;
        Ok(t.mean(y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_relu_mlp() {
    let mut store = ParamStore::new();
    let w1 = store.add("w1", random(4, 6, 7));
    let w2 = store.add("w2", random(6, 1, 8));
    let x = random(5, 4, 9);
    let r = grad_check(&mut store, opts(), |t, s| {
        let vx = t.constant(x.clone());
        let h = t.param(s, w1);
        let h = t.matmul(vx, h)?;
        let h = t.relu(h);
        let w = t.param(s, w2);
        let y = t.matmul(h, w)?;
        let y = t.leaky_relu(y, 0.2);
        t.smooth_l1_sum(y, Tensor::full(5, 1, 0.3), 2.0)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
    assert!(r.checked > 0);
}

#[test]
fn grad_check_relu_kink_is_skipped() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::row(vec![1e-7, 0.5]));
    let r = grad_check(&mut store, opts(), |t, s| {
        let v = t.param(s, x);
        let y = t.relu(v);
        Ok(t.sum(y))
    })
    .unwrap();
    assert_eq!(r.skipped, 1);
    assert_eq!(r.checked, 1);
}

#[test]
fn grad_check_ignores_roundoff_on_zero_derivative() {
    // `z` shifts every entry equally before a sum of squared deviations, so
    // its derivative is exactly zero while the loss is large.
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::row((0..40).map(|i| 25.0 * (i as f64).sin()).collect()));
    let z = store.add("z", Tensor::scalar(0.37));
    let r = grad_check(&mut store, opts(), |t, s| {
        let (vx, vz) = (t.param(s, x), t.param(s, z));
        let ones = t.constant(Tensor::full(1, 40, 1.0));
        let shift = t.matmul(vz, ones)?;
        let y = t.add(vx, shift)?;
        let m = t.mean(y);
        let mm = t.matmul(m, ones)?;
        let d = t.sub(y, mm)?;
        let d2 = t.mul(d, d)?;
        let total = t.sum(d2);
        let k = t.constant(Tensor::scalar(1e3));
        t.mul(total, k)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_detects_missing_gradient() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::row(vec![0.3, -0.7]));
    let r = grad_check(&mut store, opts(), |t, s| {
        // The value enters as a constant, so the tape sees no dependence.
        let v = t.constant(s.get(x).value.clone());
        let y = t.tanh(v);
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_error > 0.99, "{r:?}");
}

#[test]
fn grad_check_batch_norm() {
    for train in [true, false] {
        let mut store = ParamStore::new();
        let x = store.add("x", random(6, 3, 21));
        let g = store.add("g", random(1, 3, 22));
        let b = store.add("b", random(1, 3, 23));
        let w = random(6, 3, 24);
        let (mean, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
        let r = grad_check(&mut store, opts(), |t, s| {
            let (vx, vg, vb) = (t.param(s, x), t.param(s, g), t.param(s, b));
            let mode = if train {
                BnMode::Train { eps: 1e-5 }
            } else {
                BnMode::Eval { mean: &mean, var: &var, eps: 1e-5 }
            };
            let (y, _) = t.batch_norm(vx, vg, vb, mode)?;
            let vw = t.constant(w.clone());
            let y = t.mul(y, vw)?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "train={train} {r:?}");
    }
}

#[test]
fn grad_check_graph_primitives() {
    let mut store = ParamStore::new();
    let x = store.add("x", random(5, 8, 31));
    let a = store.add("a", random(4, 2, 32));
    let src: Rc<[usize]> = Rc::from(vec![0, 1, 2, 3, 4, 0, 2, 4, 1]);
    let dst: Rc<[usize]> = Rc::from(vec![0, 1, 2, 3, 4, 1, 1, 3, 0]);
    let r = grad_check(&mut store, opts(), |t, s| {
        let vx = t.param(s, x);
        let va = t.param(s, a);
        let xj = t.gather_rows(vx, src.clone())?;
        let sc = t.head_dot(xj, va, 4)?;
        let sc = t.leaky_relu(sc, 0.2);
        let al = t.segment_softmax(sc, dst.clone(), 5)?;
        let m = t.head_scale(xj, al, 4)?;
        let agg = t.scatter_add(m, dst.clone(), 5)?;
        let mean = t.segment_mean(xj, dst.clone(), 5)?;
        let both = t.concat_cols(&[agg, mean])?;
        let both = t.reshape(both, 10, 8)?;
        let p = t.mean_rows(both);
        let p = t.tanh(p);
        let rs = t.row_sum(both);
        let rs = t.tanh(rs);
        let q = t.sqrt_eps(p, 2.0)?;
        let l1 = t.sum(q);
        let l2 = t.sum(rs);
        let l = t.add(l1, l2)?;
        let sm = t.softmax_rows(vx);
        let sm = t.sub(sm, vx)?;
        let sm = t.mean(sm);
        t.add(l, sm)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn segment_softmax_sums_to_one() {
    let mut t = Tape::new();
    let x = t.constant(random(6, 2, 3));
    let idx: Rc<[usize]> = Rc::from(vec![0, 0, 1, 2, 2, 2]);
    let y = t.segment_softmax(x, idx.clone(), 3).unwrap();
    let s = t.scatter_add(y, idx, 3).unwrap();
    for v in t.value(s).data() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn huber_branches() {
    assert_eq!(huber(2.0, 2.0), 2.0);
    assert_eq!(huber(5.0, 2.0), 8.0);
    assert_eq!(huber(-5.0, 2.0), 8.0);
    assert_eq!(huber(0.0, 2.0), 0.0);
}
