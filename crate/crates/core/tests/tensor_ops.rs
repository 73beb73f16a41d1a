use fullsleepnet::tensor::{grad_check, Activation, Tape, Tensor, Var};
use fullsleepnet::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    t(shape, &data)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

/// Triple-loop reference convolution with explicit zero padding.
fn naive_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    len: usize,
    k: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let pad = (k as isize - 1) / 2;
    let mut out = vec![0.0; len * cout];
    for t in 0..len {
        for o in 0..cout {
            let mut acc = b[o];
            for kk in 0..k {
                for c in 0..cin {
                    let s = t as isize + kk as isize - pad;
                    if (0..len as isize).contains(&s) {
                        acc += x[s as usize * cin + c] * w[(kk * cin + c) * cout + o];
                    }
                }
            }
            out[t * cout + o] = acc;
        }
    }
    out
}

#[test]
fn conv1d_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3, 1], &[1.0, 2.0, 3.0]));
    let ident = tape.leaf(t(&[3, 1, 1], &[0.0, 1.0, 0.0]));
    let ones = tape.leaf(t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
    let zero = tape.leaf(t(&[1], &[0.0]));
    let y = tape.conv1d_same(x, ident, zero).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
    let y = tape.conv1d_same(x, ones, zero).unwrap();
    let expect = naive_conv(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[0.0], 3, 3, 1, 1);
    assert_eq!(expect, vec![3.0, 6.0, 5.0]);
    assert_eq!(tape.value(y), &expect[..]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zeros = tape.leaf(Tensor::zeros(vec![8, 2]));
    let w = tape.leaf(random(&mut rng, &[5, 2, 3]));
    let b = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
    let y = tape.conv1d_same(zeros, w, b).unwrap();
    for row in tape.value(y).chunks(3) {
        assert_eq!(row, &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn conv1d_rejects_bad_shapes() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros(vec![4, 2]));
    let even = tape.leaf(Tensor::zeros(vec![2, 2, 1]));
    let wrong_cin = tape.leaf(Tensor::zeros(vec![3, 3, 1]));
    let b = tape.leaf(Tensor::zeros(vec![1]));
    assert!(tape.conv1d_same(x, even, b).is_err());
    assert!(tape.conv1d_same(x, wrong_cin, b).is_err());
}

#[test]
fn conv1d_matches_naive_oracle_on_random_inputs() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (len, k, cin, cout) = (
            rng.gen_range(1..40),
            [1, 3, 5, 7][seed as usize % 4],
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let x = random(&mut rng, &[len, cin]);
        let w = random(&mut rng, &[k, cin, cout]);
        let b = random(&mut rng, &[cout]);
        let expect = naive_conv(x.data(), w.data(), b.data(), len, k, cin, cout);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let y = tape.conv1d_same(xv, wv, bv).unwrap();
        assert_eq!(tape.shape(y), &[len, cout]);
        close(tape.value(y), &expect, 1e-12);
    }
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[4, 1], &[1.0, 3.0, 2.0, 5.0]));
    let y = tape.maxpool1d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y), &[3.0, 5.0]);

    let c = tape.leaf(Tensor::full(vec![6, 2], 1.5));
    let y = tape.maxpool1d(c, 3, 3).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 1.5));

    let tie = tape.param(t(&[2, 1], &[2.0, 2.0]));
    let y = tape.maxpool1d(tie, 2, 2).unwrap();
    assert_eq!(tape.value(y), &[2.0]);
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(tie).unwrap(), &[1.0, 0.0]);

    let short = tape.leaf(Tensor::<f64>::zeros(vec![1, 1]));
    assert!(tape.maxpool1d(short, 2, 2).is_err());
}

#[test]
fn dense_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let w = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
    let b = tape.leaf(t(&[1], &[0.5]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[3.5]);

    let m = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 4.0]));
    let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zb = tape.leaf(Tensor::zeros(vec![2]));
    let y = tape.dense(m, eye, zb).unwrap();
    assert_eq!(tape.value(y), tape.value(m));

    let zw = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b3 = tape.leaf(Tensor::full(vec![3], -0.25));
    let y = tape.dense(m, zw, b3).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == -0.25));

    assert!(tape.dense(m, b3, b3).is_err());
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let z = tape.leaf(t(&[1], &[0.0]));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s), &[0.5]);
    let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
    let one = tape.leaf(t(&[1], &[1.0]));
    let th = tape.tanh(one).unwrap();
    let closed = (1f64.exp() - (-1f64).exp()) / (1f64.exp() + (-1f64).exp());
    assert!((tape.value(th)[0] - closed).abs() < 1e-15);
    assert!((closed - 0.761594).abs() < 1e-6);
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    let loss = tape.sum(r).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2], &[0.0, 0.0]));
    let b = tape.leaf(t(&[2], &[1000.0, 1000.0]));
    let c = tape.leaf(t(&[2], &[0.0, 3f64.ln()]));
    let sa = tape.softmax_lastdim(a).unwrap();
    let sb = tape.softmax_lastdim(b).unwrap();
    let sc = tape.softmax_lastdim(c).unwrap();
    assert_eq!(tape.value(sa), &[0.5, 0.5]);
    assert_eq!(tape.value(sb), &[0.5, 0.5]);
    close(tape.value(sc), &[0.25, 0.75], 1e-15);
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let h = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let a = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]));
    let y = tape.add(h, a).unwrap();
    assert_eq!(tape.value(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let zero = tape.leaf(Tensor::zeros(vec![2, 3]));
    let y = tape.add(h, zero).unwrap();
    assert_eq!(tape.value(y), tape.value(h));
    let p = tape.leaf(t(&[2], &[2.0, 3.0]));
    let q = tape.leaf(t(&[2], &[4.0, 5.0]));
    let y = tape.mul(p, q).unwrap();
    assert_eq!(tape.value(y), &[8.0, 15.0]);
    let bad = tape.leaf(Tensor::zeros(vec![2]));
    assert!(tape.add(h, bad).is_err());
}

#[test]
fn broadcast_gradient_sums_over_repeated_axis() {
    let mut tape = Tape::new();
    let h = tape.param(Tensor::full(vec![4, 2], 1.0));
    let a = tape.param(t(&[2], &[0.5, 0.25]));
    let y = tape.add(h, a).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[4.0, 4.0]);
    assert_eq!(grads.get(h).unwrap(), &[1.0; 8]);
}

#[test]
fn backward_examples() {
    // loss = sum(w * x) → dloss/dw = x
    let mut tape = Tape::new();
    let w = tape.param(t(&[3], &[0.3, -0.1, 2.0]));
    let x = tape.leaf(t(&[3], &[1.0, 2.0, -3.0]));
    let wx = tape.mul(w, x).unwrap();
    let loss = tape.sum(wx).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0, -3.0]);

    // σ'(0) = σ(0)(1 − σ(0)) = 0.25
    let mut tape = Tape::new();
    let z = tape.param(t(&[1], &[0.0]));
    let s = tape.sigmoid(z).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(z).unwrap(), &[0.25]);
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_unused_params() {
    let mut tape = Tape::new();
    let a = tape.param(t(&[2], &[1.0, 2.0]));
    let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.tanh(a).unwrap();
    assert!(tape.backward(y).is_err());
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn gradients_of_summed_losses_add() {
    let build = |tape: &mut Tape<f64>, w: Var| -> (Var, Var) {
        let s = tape.sigmoid(w).unwrap();
        let l1 = tape.sum(s).unwrap();
        let th = tape.tanh(w).unwrap();
        let sq = tape.mul(th, th).unwrap();
        let l2 = tape.sum(sq).unwrap();
        (l1, l2)
    };
    let init = t(&[3], &[0.2, -1.3, 0.7]);
    let mut tape = Tape::new();
    let w = tape.param(init.clone());
    let (l1, l2) = build(&mut tape, w);
    let g1 = tape.backward(l1).unwrap().get(w).unwrap().to_vec();
    let g2 = tape.backward(l2).unwrap().get(w).unwrap().to_vec();
    let total = tape.add(l1, l2).unwrap();
    let g = tape.backward(total).unwrap().get(w).unwrap().to_vec();
    for i in 0..3 {
        assert_eq!(g[i], g1[i] + g2[i]);
    }
}

#[test]
fn grad_check_examples() {
    // f(w) = w² at w = 3
    let err = grad_check(
        |tape, p| tape.mul(p[0], p[0]).and_then(|sq| tape.sum(sq)),
        &[t(&[1], &[3.0])],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");

    // linear f
    let err = grad_check(
        |tape, p| {
            let c = tape.leaf(t(&[3], &[0.5, -2.0, 1.25]));
            let prod = tape.mul(p[0], c)?;
            tape.sum(prod)
        },
        &[t(&[3], &[1.0, 2.0, 3.0])],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn grad_check_reports_non_finite_objectives() {
    let res = grad_check(
        |tape, p| {
            let c = tape.leaf(t(&[1], &[f64::INFINITY]));
            let prod = tape.mul(p[0], c)?;
            tape.sum(prod)
        },
        &[t(&[1], &[1.0])],
        1e-5,
    );
    assert!(res.is_err());
}

/// Weighted sum so every output coordinate contributes a distinct gradient.
fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shape = tape.shape(y).to_vec();
    let c = tape.constant(shape, w)?;
    let prod = tape.mul(y, c)?;
    tape.sum(prod)
}

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[test]
fn every_differentiable_op_passes_grad_check_over_20_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (len, cin, cout) = (
            rng.gen_range(3..9),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let k = [1, 3, 5][seed as usize % 3];
        let params = [
            random(&mut rng, &[len, cin]),
            random(&mut rng, &[k, cin, cout]),
            random(&mut rng, &[cout]),
        ];
        let err = grad_check(
            |tape, p| {
                let y = tape.conv1d_same(p[0], p[1], p[2])?;
                weighted(tape, y, seed)
            },
            &params,
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "conv seed {seed}: {err}");

        let x = random(&mut rng, &[2 * len, cin]);
        let err = grad_check(
            |tape, p| {
                let y = tape.maxpool1d(p[0], 2, 2)?;
                weighted(tape, y, seed)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "maxpool seed {seed}: {err}");

        let params = [
            random(&mut rng, &[len, cin]),
            random(&mut rng, &[cin, cout]),
            random(&mut rng, &[cout]),
        ];
        let err = grad_check(
            |tape, p| {
                let y = tape.dense(p[0], p[1], p[2])?;
                weighted(tape, y, seed)
            },
            &params,
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "dense seed {seed}: {err}");

        for kind in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
            let x = random(&mut rng, &[len, cin]);
            let err = grad_check(
                |tape, p| {
                    let y = tape.activation(p[0], kind)?;
                    weighted(tape, y, seed)
                },
                &[x],
                STEP,
            )
            .unwrap();
            assert!(err <= TOL, "{kind:?} seed {seed}: {err}");
        }

        let x = random(&mut rng, &[len, cout + 1]);
        let err = grad_check(
            |tape, p| {
                let y = tape.softmax_lastdim(p[0])?;
                weighted(tape, y, seed)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "softmax seed {seed}: {err}");

        let params = [random(&mut rng, &[len, cin]), random(&mut rng, &[cin])];
        let err = grad_check(
            |tape, p| {
                let s = tape.add(p[0], p[1])?;
                let m = tape.mul(s, p[1])?;
                weighted(tape, m, seed)
            },
            &params,
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "binary seed {seed}: {err}");

        let params = [
            random(&mut rng, &[len, cin]),
            random(&mut rng, &[cin, cout]),
        ];
        let err = grad_check(
            |tape, p| {
                let m = tape.matmul(p[0], p[1])?;
                let tr = tape.transpose(m)?;
                let r = tape.reshape(tr, vec![len * cout])?;
                weighted(tape, r, seed)
            },
            &params,
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "matmul seed {seed}: {err}");

        let params = [
            random(&mut rng, &[len, cin]),
            random(&mut rng, &[len, cout]),
        ];
        let err = grad_check(
            |tape, p| {
                let c = tape.concat_lastdim(p[0], p[1])?;
                let sc = tape.scale(c, -1.5)?;
                weighted(tape, sc, seed)
            },
            &params,
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "concat seed {seed}: {err}");

        let units = rng.gen_range(1..4);
        let params = [
            random(&mut rng, &[len, cin]),
            random(&mut rng, &[cin, 4 * units]),
            random(&mut rng, &[units, 4 * units]),
            random(&mut rng, &[4 * units]),
        ];
        for reverse in [false, true] {
            let err = grad_check(
                |tape, p| {
                    let h = tape.lstm(p[0], p[1], p[2], p[3], reverse)?;
                    weighted(tape, h, seed)
                },
                &params,
                STEP,
            )
            .unwrap();
            assert!(err <= TOL, "lstm reverse={reverse} seed {seed}: {err}");
        }

        let logits = random(&mut rng, &[len, 1]);
        let target: Vec<f64> = (0..len).map(|_| rng.gen_range(0..2) as f64).collect();
        let err = grad_check(
            |tape, p| {
                let pr = tape.sigmoid(p[0])?;
                tape.bce_mean(pr, &target, 0..len)
            },
            &[logits],
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "bce seed {seed}: {err}");

        let logits = random(&mut rng, &[len, 5]);
        let mut onehot = vec![0.0; len * 5];
        for r in 0..len - 1 {
            onehot[r * 5 + rng.gen_range(0..5)] = 1.0;
        }
        let err = grad_check(
            |tape, p| {
                let pr = tape.softmax_lastdim(p[0])?;
                tape.cce_mean(pr, &onehot, 0..len)
            },
            &[logits],
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "cce seed {seed}: {err}");
    }
}

#[test]
fn eight_pooling_blocks_divide_length_by_256() {
    let mut tape = Tape::inference();
    let mut x = tape.leaf(Tensor::<f64>::zeros(vec![256 * 3, 1]));
    let w = tape.leaf(Tensor::full(vec![3, 1, 1], 0.1));
    let b = tape.leaf(Tensor::zeros(vec![1]));
    for _ in 0..8 {
        let c = tape.conv1d_same(x, w, b).unwrap();
        assert_eq!(tape.shape(c), tape.shape(x));
        x = tape.maxpool1d(c, 2, 2).unwrap();
    }
    assert_eq!(tape.shape(x), &[3, 1]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[n], &row));
        let b = tape.leaf(t(&[n], &shifted));
        let sa = tape.softmax_lastdim(a).unwrap();
        let sb = tape.softmax_lastdim(b).unwrap();
        let total: f64 = tape.value(sa).iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        prop_assert!(tape.value(sa).iter().all(|&v| v >= 0.0));
        for (x, y) in tape.value(sa).iter().zip(tape.value(sb)) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn conv_preserves_length_and_pool_halves_it(len in 2usize..200, k in 0usize..4) {
        let k = 2 * k + 1;
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::<f64>::full(vec![len, 2], 0.3));
        let w = tape.leaf(Tensor::full(vec![k, 2, 3], 0.1));
        let b = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.conv1d_same(x, w, b).unwrap();
        prop_assert_eq!(tape.shape(y), &[len, 3]);
        let p = tape.maxpool1d(y, 2, 2).unwrap();
        prop_assert_eq!(tape.shape(p), &[len / 2, 3]);
    }
}
