use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const H: f32 = 1e-3;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0)).with_grad()
}

/// Central-difference check of `f` with respect to every input, returning
/// the worst norm-wise relative error.
fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x)).collect();
        let l = f(&mut t, &vs);
        t.scalar(l) as f64
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or(vec![0.0; input.numel()]);
        let mut numeric = vec![0.0f64; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= H;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * H as f64);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (*a as f64 - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
        let scale = na.max(nn).max(1e-6);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Projects a tensor-valued output onto a fixed random direction so the
/// check exercises every output coordinate.
fn readout(t: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let c = t.constant(shape, r).unwrap();
    let p = t.mul(y, c).unwrap();
    t.sum(p)
}

fn check_many(trials: u64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Var) {
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs = make(&mut rng);
        let err = gradcheck(&inputs, f);
        assert!(err < 1e-3, "seed {seed}: relative error {err}");
    }
}

#[test]
fn matmul_identity_and_projector() {
    let mut t = Tape::new();
    let i2 = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);
    let p = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let n = t.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let y = t.matmul(p, n).unwrap();
    assert_eq!(t.value(y), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    check_many(10, |r| vec![randn(r, &[4, 4]), randn(r, &[4, 4])], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        t.sum(y)
    });
    check_many(10, |r| vec![randn(r, &[3, 5]), randn(r, &[5, 2])], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        readout(t, y, 7)
    });
}

#[test]
fn softmax_values() {
    let mut t = Tape::new();
    let x = t.constant(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
    let y = t.softmax(x);
    for v in t.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let x = t.constant(vec![2], vec![1000.0, 0.0]).unwrap();
    let y = t.softmax(x);
    assert!((t.value(y)[0] - 1.0).abs() < 1e-7);
    assert!(t.value(y)[1].abs() < 1e-7);
    assert!(t.value(y).iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_propagates_nan() {
    let mut t = Tape::new();
    let x = t.constant(vec![2], vec![f32::NAN, 0.0]).unwrap();
    let y = t.softmax(x);
    assert!(t.value(y).iter().any(|v| v.is_nan()));
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    check_many(10, |r| vec![randn(r, &[8])], &|t, v| {
        let y = t.softmax(v[0]);
        readout(t, y, 3)
    });
    check_many(10, |r| vec![randn(r, &[3, 6])], &|t, v| {
        let y = t.softmax(v[0]);
        readout(t, y, 4)
    });
}

#[test]
fn cross_entropy_uniform_and_zero_weight() {
    let mut t = Tape::new();
    let logits = Tensor::zeros(&[1, 8]).with_grad();
    let l = t.leaf(&logits);
    let loss = t.cross_entropy(l, &[3], &[1.0]).unwrap();
    assert!((t.scalar(loss) - 8f32.ln()).abs() < 1e-6);

    let mut t = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = randn(&mut rng, &[4, 8]);
    let l = t.leaf(&logits);
    let loss = t.cross_entropy(l, &[0, 1, 2, 3], &[0.0; 4]).unwrap();
    assert_eq!(t.scalar(loss), 0.0);
    let g = t.backward(loss).unwrap();
    assert!(g.get(l).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut t = Tape::new();
    let l = t.constant(vec![1, 4], vec![0.0; 4]).unwrap();
    assert!(matches!(t.cross_entropy(l, &[4], &[1.0]), Err(Error::Index(_))));
}

#[test]
fn cross_entropy_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = Tensor::from_fn(&[4, 8], |_| rng.gen_range(-3.0f32..3.0));
    let labels = [1usize, 7, 0, 4];
    let weights = [1.0f32, 0.5, 0.0, 2.0];
    let mut oracle = 0.0f64;
    for i in 0..4 {
        let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        oracle += weights[i] as f64 * -(row[labels[i]].exp() / z).ln();
    }
    oracle /= 4.0;
    let mut t = Tape::new();
    let l = t.leaf(&logits);
    let loss = t.cross_entropy(l, &labels, &weights).unwrap();
    assert!((t.scalar(loss) as f64 - oracle).abs() < 1e-6, "{} vs {oracle}", t.scalar(loss));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    check_many(10, |r| vec![randn(r, &[4, 8])], &|t, v| {
        t.cross_entropy(v[0], &[2, 0, 7, 5], &[1.0, 0.3, 0.0, 2.0]).unwrap()
    });
}

#[test]
fn layer_norm_values_and_gradient() {
    let mut t = Tape::new();
    let x = t.constant(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let g = t.constant(vec![4], vec![1.0; 4]).unwrap();
    let b = t.constant(vec![4], vec![0.0; 4]).unwrap();
    let y = t.layer_norm(x, g, b).unwrap();
    let mean: f32 = t.value(y).iter().sum::<f32>() / 4.0;
    assert!(mean.abs() < 1e-6);
    // constant rows normalize to the bias
    let x = t.constant(vec![1, 4], vec![5.0; 4]).unwrap();
    let b2 = t.constant(vec![4], vec![0.5; 4]).unwrap();
    let y = t.layer_norm(x, g, b2).unwrap();
    assert!(t.value(y).iter().all(|v| (v - 0.5).abs() < 1e-6));
    // symmetric: negating the input negates the normalized output
    let x = t.constant(vec![1, 3], vec![1.0, -2.0, 4.0]).unwrap();
    let xn = t.scale(x, -1.0);
    let g3 = t.constant(vec![3], vec![1.0; 3]).unwrap();
    let b3 = t.constant(vec![3], vec![0.0; 3]).unwrap();
    let y1 = t.layer_norm(x, g3, b3).unwrap();
    let y2 = t.layer_norm(xn, g3, b3).unwrap();
    for (a, b) in t.value(y1).iter().zip(t.value(y2)) {
        assert!((a + b).abs() < 1e-6);
    }

    check_many(
        10,
        |r| vec![randn(r, &[3, 6]), randn(r, &[6]), randn(r, &[6])],
        &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            readout(t, y, 11)
        },
    );
}

#[test]
fn gelu_values_and_gradient() {
    let mut t = Tape::new();
    let x = t.constant(vec![3], vec![0.0, 3.0, -3.0]).unwrap();
    let y = t.gelu(x);
    assert_eq!(t.value(y)[0], 0.0);
    // gelu(x) - gelu(-x) = x
    assert!((t.value(y)[1] - t.value(y)[2] - 3.0).abs() < 1e-6);
    check_many(10, |r| vec![randn(r, &[12])], &|t, v| {
        let y = t.gelu(v[0]);
        readout(t, y, 5)
    });
}

#[test]
fn l2_normalize_values_and_gradient() {
    let mut t = Tape::new();
    let x = t.constant(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
    let y = t.l2_normalize(x);
    assert_eq!(t.value(y), &[0.6, 0.8, 0.0, 0.0]);

    // zero row: zero output and zero gradient
    let mut t = Tape::new();
    let z = Tensor::zeros(&[1, 3]).with_grad();
    let zv = t.leaf(&z);
    let y = t.l2_normalize(zv);
    let l = readout(&mut t, y, 1);
    let g = t.backward(l).unwrap();
    assert!(g.get(zv).unwrap().iter().all(|&v| v == 0.0));

    check_many(10, |r| vec![randn(r, &[3, 5])], &|t, v| {
        let y = t.l2_normalize(v[0]);
        readout(t, y, 6)
    });
}

#[test]
fn mean_rows_values_and_gradient() {
    let mut t = Tape::new();
    let x = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let y = t.mean_rows(x).unwrap();
    assert_eq!(t.value(y), &[2.0, 4.0]);
    // a single row is its own mean
    let x = t.constant(vec![1, 3], vec![1.0, -1.0, 2.0]).unwrap();
    let y = t.mean_rows(x).unwrap();
    assert_eq!(t.value(y), &[1.0, -1.0, 2.0]);
    check_many(10, |r| vec![randn(r, &[4, 3])], &|t, v| {
        let y = t.mean_rows(v[0]).unwrap();
        readout(t, y, 8)
    });
}

#[test]
fn mse_values_and_gradient() {
    let mut t = Tape::new();
    let a = t.constant(vec![2], vec![1.0, 2.0]).unwrap();
    let y = t.mse(a, a).unwrap();
    assert_eq!(t.scalar(y), 0.0);
    let b = t.constant(vec![2], vec![2.0, 0.0]).unwrap();
    let ab = t.mse(a, b).unwrap();
    let ba = t.mse(b, a).unwrap();
    assert_eq!(t.scalar(ab), 2.5);
    assert_eq!(t.scalar(ab), t.scalar(ba));
    check_many(10, |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], &|t, v| t.mse(v[0], v[1]).unwrap());
}

#[test]
fn structural_ops_gradients() {
    check_many(
        10,
        |r| vec![randn(r, &[4, 6]), randn(r, &[6])],
        &|t, v| {
            let x = t.add_row(v[0], v[1]).unwrap();
            let a = t.slice_cols(x, 1, 3).unwrap();
            let b = t.slice_cols(x, 4, 2).unwrap();
            let c = t.concat_cols(&[b, a]).unwrap();
            let d = t.gather_rows(c, &[3, 0, 0]).unwrap();
            let e = t.transpose(d).unwrap();
            let f = t.scale(e, 0.5);
            let s = t.sub(f, e).unwrap();
            let m = t.mul(s, e).unwrap();
            let row = t.mean_rows(x).unwrap();
            let rr = t.concat_rows(&[row, row]).unwrap();
            let l1 = readout(t, m, 2);
            let l2 = readout(t, rr, 3);
            t.add(l1, l2).unwrap()
        },
    );
}

#[test]
fn backward_clears_tape_and_fills_reachable_leaves() {
    let mut t = Tape::new();
    let a = Tensor::from_fn(&[2, 2], |i| i as f32).with_grad();
    let mut b = Tensor::from_fn(&[2, 2], |i| 1.0 - i as f32).with_grad();
    let va = t.leaf(&a);
    let vb = t.leaf(&b);
    let y = t.matmul(va, vb).unwrap();
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    assert!(t.is_empty());
    g.accumulate_into(vb, &mut b).unwrap();
    assert_eq!(b.grad().unwrap().len(), 4);
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[8, 8]);
        let b = randn(&mut rng, &[8, 8]);
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(&a), t.leaf(&b));
        let y = t.matmul(va, vb).unwrap();
        let s = t.softmax(y);
        let l = readout(&mut t, s, 1);
        let out = t.scalar(l);
        let g = t.backward(l).unwrap();
        (out.to_bits(), g.get(va).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f32..50.0, 1..16)) {
            let mut t = Tape::new();
            let x = t.constant(vec![xs.len()], xs.clone()).unwrap();
            let y = t.softmax(x);
            let s: f64 = t.value(y).iter().map(|&v| v as f64).sum();
            prop_assert!(t.value(y).iter().all(|&v| v >= 0.0));
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn l2_normalize_unit_and_scale_free(
            xs in proptest::collection::vec(-10.0f32..10.0, 2..12),
            c in 0.01f32..100.0,
        ) {
            prop_assume!(xs.iter().any(|v| v.abs() > 1e-3));
            let mut t = Tape::new();
            let x = t.constant(vec![xs.len()], xs.clone()).unwrap();
            let cx = t.scale(x, c);
            let y = t.l2_normalize(x);
            let yc = t.l2_normalize(cx);
            let n: f64 = t.value(y).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
            for (a, b) in t.value(y).iter().zip(t.value(yc)) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
