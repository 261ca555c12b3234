use super::*;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn conv2d_all_ones_sums_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0f64));
    let w = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0f64));
    let b = tape.leaf(Tensor::zeros(vec![1]));
    let out = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(out).data()[0], 9.0);
}

#[test]
fn conv2d_stem_output_shape() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 3, 32, 32]));
    let w = tape.leaf(Tensor::zeros(vec![64, 3, 7, 7]));
    let b = tape.leaf(Tensor::zeros(vec![64]));
    let out = tape.conv2d(x, w, b, 2, 3).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 64, 16, 16]);
}

#[test]
fn conv2d_rejects_zero_stride_and_bad_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 2, 5, 5]));
    let w = tape.leaf(Tensor::zeros(vec![3, 2, 3, 3]));
    let b = tape.leaf(Tensor::zeros(vec![3]));
    assert!(matches!(
        tape.conv2d(x, w, b, 0, 1),
        Err(Error::InvalidArgument(_))
    ));
    let w_bad = tape.leaf(Tensor::zeros(vec![3, 5, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, w_bad, b, 1, 1),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn conv2d_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = rand_tensor(vec![1, 2, 5, 5], &mut rng);
    let w0 = rand_tensor(vec![3, 2, 3, 3], &mut rng);
    let b0 = rand_tensor(vec![3], &mut rng);

    // Input gradient.
    let w_for_input = w0.clone();
    let b_for_input = b0.clone();
    let err = grad_check(
        &mut |tape, x| {
            let w = tape.leaf(w_for_input.clone());
            let b = tape.leaf(b_for_input.clone());
            let y = tape.conv2d(x, w, b, 2, 1)?;
            tape.sum(y)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "conv input grad rel err {err}");

    // Weight gradient (check by treating the weight as the varied point).
    let x_for_w = x0.clone();
    let b_for_w = b0.clone();
    let err = grad_check(
        &mut |tape, w| {
            let x = tape.leaf(x_for_w.clone());
            let b = tape.leaf(b_for_w.clone());
            let y = tape.conv2d(x, w, b, 2, 1)?;
            tape.sum(y)
        },
        &w0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "conv weight grad rel err {err}");

    // Bias gradient.
    let err = grad_check(
        &mut |tape, b| {
            let x = tape.leaf(x0.clone());
            let w = tape.leaf(w0.clone());
            let y = tape.conv2d(x, w, b, 2, 1)?;
            tape.sum(y)
        },
        &b0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "conv bias grad rel err {err}");
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn linear_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap());
    let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.leaf(Tensor::zeros(vec![2]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn batchnorm_train_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x0 = rand_tensor(vec![2, 3, 4, 4], &mut rng);
    let gamma0 = rand_tensor(vec![3], &mut rng);
    let beta0 = rand_tensor(vec![3], &mut rng);

    let err = grad_check(
        &mut |tape, x| {
            let gamma = tape.leaf(gamma0.clone());
            let beta = tape.leaf(beta0.clone());
            let (y, _) = tape.batchnorm2d_train(x, gamma, beta, 1e-5)?;
            // A non-uniform functional so mean-removal terms matter.
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "bn input grad rel err {err}");

    let x_fixed = x0.clone();
    let beta_fixed = beta0.clone();
    let err = grad_check(
        &mut |tape, gamma| {
            let x = tape.leaf(x_fixed.clone());
            let beta = tape.leaf(beta_fixed.clone());
            let (y, _) = tape.batchnorm2d_train(x, gamma, beta, 1e-5)?;
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        },
        &gamma0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "bn gamma grad rel err {err}");
}

#[test]
fn batchnorm_eval_uses_running_stats_and_backprops() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x0 = rand_tensor(vec![2, 2, 3, 3], &mut rng);
    let rm = vec![0.1f64, -0.2];
    let rv = vec![0.5f64, 1.5];
    let err = grad_check(
        &mut |tape, x| {
            let gamma = tape.leaf(Tensor::new(vec![2], vec![1.2, 0.7]).unwrap());
            let beta = tape.leaf(Tensor::new(vec![2], vec![0.3, -0.1]).unwrap());
            let y = tape.batchnorm2d_eval(x, gamma, beta, 1e-5, &rm, &rv)?;
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "bn eval input grad rel err {err}");
}

#[test]
fn cross_entropy_uniform_two_class() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap());
    let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
    let v = tape.value(loss).data()[0];
    assert!((v - 0.6931471805599453).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::new(vec![1, 2], vec![10.0f64, -10.0]).unwrap());
    let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
    let v = tape.value(loss).data()[0];
    // ln(1 + e^-20)
    let expected = 2.06115362031438e-9;
    assert!((v - expected).abs() / expected < 1e-6, "got {v}");
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut tape = Tape::new();
    let logits = tape.leaf_var(Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap());
    let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(logits).unwrap();
    let expected = [0.09003057317038046, 0.24472847105479767, -0.3347590442251782];
    for (gv, ev) in g.iter().zip(expected) {
        assert!((gv - ev).abs() < 1e-4, "grad {gv} vs {ev}");
    }
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(vec![1, 3]));
    assert!(matches!(
        tape.cross_entropy_per_sample(logits, &[3]),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf_var(Tensor::from_fn(vec![2, 2], |i| i as f64));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum() {
    let mut tape = Tape::new();
    let x = tape.leaf_var(Tensor::new(vec![1], vec![3.0f64]).unwrap());
    let x2 = tape.mul(x, x).unwrap();
    let s = tape.sum(x2).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf_var(Tensor::scalar(1.0f64));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
}

#[test]
fn gradient_accumulation_is_linear() {
    // grad of a*L1 + b*L2 equals a*grad(L1) + b*grad(L2).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_tensor(vec![4], &mut rng);
    let (a, b) = (1.7f64, -0.6);

    let grad_of = |which: u8| -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf_var(x0.clone());
        let l1 = {
            let sq = tape.mul(x, x).unwrap();
            tape.sum(sq).unwrap()
        };
        let l2 = tape.sum(x).unwrap();
        let target = match which {
            1 => l1,
            2 => l2,
            _ => {
                let l1s = tape.scale(l1, a).unwrap();
                let l2s = tape.scale(l2, b).unwrap();
                tape.add(l1s, l2s).unwrap()
            }
        };
        tape.backward(target).unwrap();
        tape.grad(x).unwrap().to_vec()
    };

    let g1 = grad_of(1);
    let g2 = grad_of(2);
    let combined = grad_of(0);
    for i in 0..4 {
        let expected = a * g1[i] + b * g2[i];
        let rel = (combined[i] - expected).abs() / f64::max(1.0, expected.abs());
        assert!(rel < 1e-12, "linearity violated at {i}: {} vs {expected}", combined[i]);
    }
}

#[test]
fn forward_backward_bit_deterministic() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x0 = rand_tensor(vec![2, 2, 6, 6], &mut rng);
        let w0 = rand_tensor(vec![3, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf_var(x0);
        let w = tape.leaf_var(w0);
        let b = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let r = tape.relu(y).unwrap();
        let p = tape.global_avg_pool(r).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        (
            tape.value(s).data().to_vec(),
            tape.grad(x).unwrap().to_vec(),
        )
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1, g2);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1], vec![1e308f64]).unwrap());
    // 1e308 + 1e308 overflows to inf and must surface as an error.
    assert!(matches!(
        tape.add(x, x),
        Err(Error::NonFinite { op: "add" })
    ));
}

#[test]
fn grad_check_on_sum_is_exact() {
    let err = grad_check(
        &mut |tape, x| tape.sum(x),
        &Tensor::new(vec![3], vec![0.3f64, -1.2, 7.0]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "sum grad err {err}");
}

#[test]
fn grad_check_on_square_sum() {
    let err = grad_check(
        &mut |tape, x| {
            let sq = tape.mul(x, x)?;
            tape.sum(sq)
        },
        &Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "square sum grad err {err}");
}

#[test]
fn grad_check_two_layer_net_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let w1 = rand_tensor(vec![5, 4], &mut rng);
    let b1 = rand_tensor(vec![5], &mut rng);
    let w2 = rand_tensor(vec![3, 5], &mut rng);
    let b2 = rand_tensor(vec![3], &mut rng);
    let x0 = rand_tensor(vec![2, 4], &mut rng);
    let err = grad_check(
        &mut |tape, x| {
            let w1 = tape.leaf(w1.clone());
            let b1 = tape.leaf(b1.clone());
            let w2 = tape.leaf(w2.clone());
            let b2 = tape.leaf(b2.clone());
            let h = tape.linear(x, w1, b1)?;
            let h = tape.relu(h)?;
            let logits = tape.linear(h, w2, b2)?;
            tape.softmax_cross_entropy(logits, &[1, 2])
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "two layer net grad err {err}");
}

#[test]
fn composed_conv_stack_gradients_match_fd() {
    // conv -> bn -> relu -> conv -> add(residual) -> gap -> linear -> ce,
    // checked against finite differences through the whole stack.
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let w1 = rand_tensor(vec![4, 2, 3, 3], &mut rng);
    let b1 = rand_tensor(vec![4], &mut rng);
    let gamma = rand_tensor(vec![4], &mut rng);
    let beta = rand_tensor(vec![4], &mut rng);
    let w2 = rand_tensor(vec![4, 4, 3, 3], &mut rng);
    let b2 = rand_tensor(vec![4], &mut rng);
    let wh = rand_tensor(vec![3, 4], &mut rng);
    let bh = rand_tensor(vec![3], &mut rng);
    let x0 = rand_tensor(vec![2, 2, 6, 6], &mut rng);

    let err = grad_check(
        &mut |tape, x| {
            let w1 = tape.leaf(w1.clone());
            let b1 = tape.leaf(b1.clone());
            let gamma = tape.leaf(gamma.clone());
            let beta = tape.leaf(beta.clone());
            let w2 = tape.leaf(w2.clone());
            let b2 = tape.leaf(b2.clone());
            let wh = tape.leaf(wh.clone());
            let bh = tape.leaf(bh.clone());
            let c1 = tape.conv2d(x, w1, b1, 1, 1)?;
            let (n1, _) = tape.batchnorm2d_train(c1, gamma, beta, 1e-5)?;
            let r1 = tape.relu(n1)?;
            let c2 = tape.conv2d(r1, w2, b2, 1, 1)?;
            let res = tape.add(c2, r1)?;
            let pooled = tape.global_avg_pool(res)?;
            let logits = tape.linear(pooled, wh, bh)?;
            tape.softmax_cross_entropy(logits, &[0, 2])
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "composed stack grad err {err}");
}
