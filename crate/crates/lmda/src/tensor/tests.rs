use super::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn randn(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {}: {} vs {} (tol {})", i, x, y, tol);
    }
}

/// Checks the analytic gradient of `sum(op(x))` w.r.t. one chosen input
/// against central finite differences.
fn grad_check(
    build: impl Fn(&Tape, &Tensor) -> Tensor,
    x0: &[f64],
    shape: &[usize],
    tol: f64,
) {
    let x = Tensor::new(shape, x0.to_vec()).unwrap();
    x.set_requires_grad(true);
    let tape = Tape::new();
    let out = build(&tape, &x);
    let loss = tape.sum(&out);
    tape.backward(&loss).unwrap();
    let analytic = x.grad().unwrap();

    let shape = shape.to_vec();
    let numeric = central_difference(
        |v| {
            let x = Tensor::new(&shape, v.to_vec()).unwrap();
            let tape = Tape::new();
            build(&tape, &x).data().iter().sum()
        },
        x0,
        1e-6,
    );
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(rel_error(*a, *n, 1e-4) < tol, "analytic {} vs numeric {}", a, n);
    }
}

// ── conv2d ───────────────────────────────────────────────────────────

#[test]
fn conv_hand_cross_correlation() {
    let tape = Tape::new();
    let x = Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let k = Tensor::new(&[1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
    let out = tape.conv2d_valid(&x, &k, 1, 0, 0).unwrap();
    assert_eq!(out.shape(), vec![1, 1, 1, 2]);
    assert_close(&out.to_vec(), &[3.0, 5.0], 0.0);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = StdRng::seed_from_u64(1);
    let x = Tensor::new(&[2, 3, 4, 5], randn(&mut rng, 120)).unwrap();
    let k = Tensor::new(&[3, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let tape = Tape::new();
    let out = tape.conv2d_valid(&x, &k, 1, 0, 0).unwrap();
    assert_close(&out.to_vec(), &x.to_vec(), 0.0);
}

#[test]
fn conv_grouped_ones_identity() {
    // groups = Din with all-one 1×1 kernels is exactly the identity
    let mut rng = StdRng::seed_from_u64(2);
    let x = Tensor::new(&[2, 4, 3, 5], randn(&mut rng, 120)).unwrap();
    let k = Tensor::new(&[4, 1, 1, 1], vec![1.0; 4]).unwrap();
    let tape = Tape::new();
    let out = tape.conv2d_valid(&x, &k, 4, 0, 0).unwrap();
    assert_eq!(out.to_vec(), x.to_vec());
}

#[test]
fn conv_kernel_gradient_finite_difference() {
    let mut rng = StdRng::seed_from_u64(3);
    let x0 = randn(&mut rng, 2 * 3 * 5 * 7);
    let k0 = randn(&mut rng, 2 * 3 * 2 * 3);
    let x = Tensor::new(&[2, 3, 5, 7], x0.clone()).unwrap();
    let k = Tensor::new(&[2, 3, 2, 3], k0.clone()).unwrap();
    k.set_requires_grad(true);
    let tape = Tape::new();
    let out = tape.conv2d_valid(&x, &k, 1, 0, 0).unwrap();
    let loss = tape.sum(&out);
    tape.backward(&loss).unwrap();
    let analytic = k.grad().unwrap();

    let numeric = central_difference(
        |kv| {
            let k = Tensor::new(&[2, 3, 2, 3], kv.to_vec()).unwrap();
            let tape = Tape::new();
            tape.conv2d_valid(&x, &k, 1, 0, 0).unwrap().data().iter().sum()
        },
        &k0,
        1e-6,
    );
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(rel_error(*a, *n, 1.0) < 1e-6, "{} vs {}", a, n);
    }
}

#[test]
fn conv_input_gradient_with_padding_and_groups() {
    let mut rng = StdRng::seed_from_u64(4);
    let x0 = randn(&mut rng, 1 * 4 * 3 * 6);
    let k0 = randn(&mut rng, 4 * 2 * 3 * 2);
    let k = Tensor::new(&[4, 2, 3, 2], k0).unwrap();
    grad_check(
        |tape, x| tape.conv2d_valid(x, &k, 2, 1, 0).unwrap(),
        &x0,
        &[1, 4, 3, 6],
        1e-5,
    );
}

#[test]
fn conv_shape_errors_are_descriptive() {
    let tape = Tape::new();
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    let k = Tensor::zeros(&[2, 2, 1, 1]);
    let err = tape.conv2d_valid(&x, &k, 1, 0, 0).unwrap_err();
    assert!(err.to_string().contains("kernel depth"), "{err}");
    let k = Tensor::zeros(&[2, 3, 9, 1]);
    let err = tape.conv2d_valid(&x, &k, 1, 0, 0).unwrap_err();
    assert!(err.to_string().contains("height"), "{err}");
}

// ── channel_contract ─────────────────────────────────────────────────

fn contract_oracle(x: &[f64], w: &[f64], b: usize, d: usize, c: usize, t: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * h * c * t];
    for bi in 0..b {
        for hi in 0..h {
            for ci in 0..c {
                for ti in 0..t {
                    let mut s = 0.0;
                    for di in 0..d {
                        s += x[((bi * d + di) * c + ci) * t + ti] * w[(hi * d + di) * c + ci];
                    }
                    out[((bi * h + hi) * c + ci) * t + ti] = s;
                }
            }
        }
    }
    out
}

#[test]
fn contract_identity_weights() {
    let mut rng = StdRng::seed_from_u64(5);
    let x = Tensor::new(&[2, 1, 3, 4], randn(&mut rng, 24)).unwrap();
    let w = Tensor::new(&[1, 1, 3], vec![1.0; 3]).unwrap();
    let tape = Tape::new();
    let out = tape.channel_contract(&x, &w).unwrap();
    assert_eq!(out.to_vec(), x.to_vec());
}

#[test]
fn contract_hand_example() {
    // x = [[1,2],[3,4]] (C=2, T=2, Dx=1), w picks each channel into its own depth
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let tape = Tape::new();
    let out = tape.channel_contract(&x, &w).unwrap();
    assert_eq!(out.shape(), vec![1, 2, 2, 2]);
    assert_close(&out.to_vec(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 4.0], 0.0);
}

#[test]
fn contract_matches_naive_loop_oracle() {
    let mut rng = StdRng::seed_from_u64(6);
    for _ in 0..50 {
        let b = rng.gen_range(1..3usize);
        let d = rng.gen_range(1..4usize);
        let c = rng.gen_range(1..5usize);
        let t = rng.gen_range(1..6usize);
        let h = rng.gen_range(1..7usize);
        let xv = randn(&mut rng, b * d * c * t);
        let wv = randn(&mut rng, h * d * c);
        let x = Tensor::new(&[b, d, c, t], xv.clone()).unwrap();
        let w = Tensor::new(&[h, d, c], wv.clone()).unwrap();
        let tape = Tape::new();
        let out = tape.channel_contract(&x, &w).unwrap();
        assert_close(&out.to_vec(), &contract_oracle(&xv, &wv, b, d, c, t, h), 1e-12);
    }
}

#[test]
fn contract_gradients() {
    let mut rng = StdRng::seed_from_u64(7);
    let xv = randn(&mut rng, 2 * 3 * 4 * 5);
    let wv = randn(&mut rng, 6 * 3 * 4);
    let w = Tensor::new(&[6, 3, 4], wv.clone()).unwrap();
    grad_check(|tape, x| tape.channel_contract(x, &w).unwrap(), &xv, &[2, 3, 4, 5], 1e-5);

    let x = Tensor::new(&[2, 3, 4, 5], xv).unwrap();
    grad_check(|tape, w| tape.channel_contract(&x, w).unwrap(), &wv, &[6, 3, 4], 1e-5);
}

#[test]
fn contract_dimension_errors() {
    let tape = Tape::new();
    let x = Tensor::zeros(&[1, 2, 3, 4]);
    let w = Tensor::zeros(&[5, 2, 9]);
    assert!(tape.channel_contract(&x, &w).unwrap_err().to_string().contains("channel"));
}

// ── elementwise ──────────────────────────────────────────────────────

#[test]
fn gelu_values() {
    let tape = Tape::new();
    let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
    let y = tape.gelu(&x);
    assert_eq!(y.to_vec()[0], 0.0);
    assert!((y.to_vec()[1] - 0.8413447).abs() < 1e-7);
}

#[test]
fn gelu_gradient_at_negative_input() {
    let x0 = [-0.7];
    let x = Tensor::new(&[1], x0.to_vec()).unwrap();
    x.set_requires_grad(true);
    let tape = Tape::new();
    let y = tape.gelu(&x);
    tape.backward(&tape.sum(&y)).unwrap();
    let numeric = central_difference(|v| gelu_scalar(v[0]), &x0, 1e-6);
    assert!((x.grad().unwrap()[0] - numeric[0]).abs() < 1e-8);
}

#[test]
fn hadamard_ones_identity() {
    let mut rng = StdRng::seed_from_u64(8);
    let xv = randn(&mut rng, 12);
    let x = Tensor::new(&[3, 4], xv.clone()).unwrap();
    let ones = Tensor::new(&[3, 4], vec![1.0; 12]).unwrap();
    let tape = Tape::new();
    assert_eq!(tape.hadamard(&x, &ones).unwrap().to_vec(), xv);
}

// ── softmax ──────────────────────────────────────────────────────────

#[test]
fn softmax_uniform() {
    let tape = Tape::new();
    let x = Tensor::new(&[5], vec![2.5; 5]).unwrap();
    let y = tape.softmax(&x, 0).unwrap();
    assert_close(&y.to_vec(), &[0.2; 5], 1e-15);
}

#[test]
fn softmax_closed_form() {
    let tape = Tape::new();
    let x = Tensor::new(&[2], vec![0.0, 2.0_f64.ln()]).unwrap();
    let y = tape.softmax(&x, 0).unwrap();
    assert_close(&y.to_vec(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15);
}

#[test]
fn softmax_shift_invariance() {
    let tape = Tape::new();
    let x = Tensor::new(&[3], vec![1.0, 2.0, 4.0]).unwrap();
    let shifted = Tensor::new(&[3], vec![1.0 + 8.0, 2.0 + 8.0, 4.0 + 8.0]).unwrap();
    let a = tape.softmax(&x, 0).unwrap();
    let b = tape.softmax(&shifted, 0).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
}

#[test]
fn softmax_gradient() {
    let mut rng = StdRng::seed_from_u64(9);
    let xv = randn(&mut rng, 2 * 3 * 4);
    // weight the slices so the gradient is not identically zero
    let weights: Vec<f64> = randn(&mut rng, 24);
    let w = Tensor::new(&[2, 3, 4], weights).unwrap();
    grad_check(
        |tape, x| {
            let s = tape.softmax(x, 1).unwrap();
            tape.hadamard(&s, &w).unwrap()
        },
        &xv,
        &[2, 3, 4],
        1e-5,
    );
}

// ── pooling / structural ─────────────────────────────────────────────

#[test]
fn avg_pool_hand_examples() {
    let tape = Tape::new();
    let x = Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_close(&tape.avg_pool_time(&x, 2).unwrap().to_vec(), &[1.5, 3.5], 0.0);
    assert_eq!(tape.avg_pool_time(&x, 1).unwrap().to_vec(), x.to_vec());
    let x5 = Tensor::new(&[1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert_close(&tape.avg_pool_time(&x5, 2).unwrap().to_vec(), &[1.5, 3.5], 0.0);
    assert!(tape.avg_pool_time(&x5, 6).is_err());
}

#[test]
fn transpose_involution() {
    let mut rng = StdRng::seed_from_u64(10);
    let xv = randn(&mut rng, 2 * 3 * 4 * 5);
    let x = Tensor::new(&[2, 3, 4, 5], xv.clone()).unwrap();
    let tape = Tape::new();
    let y = tape.transpose_axes(&x, 1, 2).unwrap();
    assert_eq!(y.shape(), vec![2, 4, 3, 5]);
    let z = tape.transpose_axes(&y, 1, 2).unwrap();
    assert_eq!(z.to_vec(), xv);
}

#[test]
fn linear_hand_example() {
    let tape = Tape::new();
    let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
    assert_close(&tape.linear(&x, &w, &b).unwrap().to_vec(), &[2.0, 3.0], 0.0);
}

#[test]
fn structural_op_gradients() {
    let mut rng = StdRng::seed_from_u64(11);
    let shapes: [&[usize]; 3] = [&[2, 3, 4, 5], &[1, 2, 3, 6], &[3, 1, 2, 4]];
    for shape in shapes {
        let n: usize = shape.iter().product();
        let xv = randn(&mut rng, n);
        let wv: Vec<f64> = randn(&mut rng, n);
        let weight_full = Tensor::new(shape, wv).unwrap();
        grad_check(
            |tape, x| {
                let t = tape.transpose_axes(x, 1, 2).unwrap();
                let t = tape.transpose_axes(&t, 1, 2).unwrap();
                tape.hadamard(&t, &weight_full).unwrap()
            },
            &xv,
            shape,
            1e-5,
        );
        grad_check(|tape, x| tape.avg_pool_time(x, 2).unwrap(), &xv, shape, 1e-5);
        grad_check(|tape, x| tape.mean_axis(x, 2, true).unwrap(), &xv, shape, 1e-5);
        grad_check(|tape, x| tape.replicate_pad_rows(x, 2).unwrap(), &xv, shape, 1e-5);
    }
}

#[test]
fn replicate_pad_edges() {
    let tape = Tape::new();
    let x = Tensor::new(&[1, 1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = tape.replicate_pad_rows(&x, 1).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 5, 2]);
    assert_eq!(y.to_vec(), vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0]);
    let same = tape.replicate_pad_rows(&x, 0).unwrap();
    assert_eq!(same.to_vec(), x.to_vec());
}

#[test]
fn broadcast_and_repeat_gradients() {
    let mut rng = StdRng::seed_from_u64(12);
    let f0 = randn(&mut rng, 2 * 3 * 4 * 5);
    let m0 = randn(&mut rng, 2 * 3 * 1 * 5);
    let m = Tensor::new(&[2, 3, 1, 5], m0.clone()).unwrap();
    grad_check(|tape, f| tape.broadcast_mul_spatial(f, &m).unwrap(), &f0, &[2, 3, 4, 5], 1e-5);
    let f = Tensor::new(&[2, 3, 4, 5], f0).unwrap();
    grad_check(|tape, m| tape.broadcast_mul_spatial(&f, m).unwrap(), &m0, &[2, 3, 1, 5], 1e-5);

    let x0 = randn(&mut rng, 2 * 1 * 3 * 4);
    grad_check(|tape, x| tape.repeat_depth(x, 5).unwrap(), &x0, &[2, 1, 3, 4], 1e-5);
}

#[test]
fn matmul_and_linear_gradients() {
    let mut rng = StdRng::seed_from_u64(13);
    let a0 = randn(&mut rng, 6);
    let b0 = randn(&mut rng, 12);
    let b = Tensor::new(&[3, 4], b0.clone()).unwrap();
    grad_check(|tape, a| tape.matmul(a, &b).unwrap(), &a0, &[2, 3], 1e-5);
    let a = Tensor::new(&[2, 3], a0).unwrap();
    grad_check(|tape, b| tape.matmul(&a, b).unwrap(), &b0, &[3, 4], 1e-5);

    let w0 = randn(&mut rng, 4 * 3);
    let bias0 = randn(&mut rng, 4);
    let x = Tensor::new(&[2, 3], randn(&mut rng, 6)).unwrap();
    let bias = Tensor::new(&[4], bias0.clone()).unwrap();
    grad_check(|tape, w| tape.linear(&x, w, &bias).unwrap(), &w0, &[4, 3], 1e-5);
    let w = Tensor::new(&[4, 3], w0).unwrap();
    grad_check(|tape, b| tape.linear(&x, &w, b).unwrap(), &bias0, &[4], 1e-5);
}

// ── batch norm ───────────────────────────────────────────────────────

#[test]
fn batch_norm_training_normalizes() {
    let mut rng = StdRng::seed_from_u64(14);
    let x = Tensor::new(&[4, 2, 3, 5], randn(&mut rng, 120)).unwrap();
    let gamma = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
    let beta = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
    let mut state = BatchNormState::new(2);
    let tape = Tape::new();
    let y = tape.batch_norm(&x, &gamma, &beta, &mut state, true).unwrap();
    let yd = y.to_vec();
    // per-depth mean ~0, var ~1 (up to eps)
    for d in 0..2 {
        let mut vals = vec![];
        for b in 0..4 {
            let base = (b * 2 + d) * 15;
            vals.extend_from_slice(&yd[base..base + 15]);
        }
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
    assert_ne!(state.running_mean, vec![0.0, 0.0]);
}

#[test]
fn batch_norm_gradients() {
    let mut rng = StdRng::seed_from_u64(15);
    let x0 = randn(&mut rng, 3 * 2 * 2 * 4);
    let g0 = randn(&mut rng, 2);
    let b0 = randn(&mut rng, 2);
    let wv = randn(&mut rng, 48);
    let weight = Tensor::new(&[3, 2, 2, 4], wv).unwrap();

    let gamma = Tensor::new(&[2], g0.clone()).unwrap();
    let beta = Tensor::new(&[2], b0.clone()).unwrap();
    grad_check(
        |tape, x| {
            let mut st = BatchNormState::new(2);
            let y = tape.batch_norm(x, &gamma, &beta, &mut st, true).unwrap();
            tape.hadamard(&y, &weight).unwrap()
        },
        &x0,
        &[3, 2, 2, 4],
        1e-4,
    );

    let x = Tensor::new(&[3, 2, 2, 4], x0).unwrap();
    let beta2 = Tensor::new(&[2], b0).unwrap();
    grad_check(
        |tape, gamma| {
            let mut st = BatchNormState::new(2);
            let y = tape.batch_norm(&x, gamma, &beta2, &mut st, true).unwrap();
            tape.hadamard(&y, &weight).unwrap()
        },
        &g0,
        &[2],
        1e-5,
    );
}

// ── backward semantics ───────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let x = Tensor::new(&[3], vec![5.0, -2.0, 0.5]).unwrap();
    x.set_requires_grad(true);
    let tape = Tape::new();
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_quadratic_closed_form() {
    let x = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
    x.set_requires_grad(true);
    let tape = Tape::new();
    let sq = tape.hadamard(&x, &x).unwrap();
    let loss = tape.sum(&sq);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -4.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    x.set_requires_grad(true);
    let tape = Tape::new();
    let y = tape.scale(&x, 2.0);
    assert!(matches!(tape.backward(&y), Err(TensorError::NotScalar { .. })));
}

#[test]
fn backward_accumulates_without_reset() {
    let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    x.set_requires_grad(true);
    let tape = Tape::new();
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

// ── properties ───────────────────────────────────────────────────────

use proptest::prelude::*;

proptest! {
    #[test]
    // logit spread kept below ~36 so no probability rounds to exactly 1.0
    fn softmax_slices_sum_to_one(vals in proptest::collection::vec(-15.0f64..15.0, 6..30)) {
        let n = vals.len();
        let x = Tensor::new(&[n], vals).unwrap();
        let tape = Tape::new();
        let y = tape.softmax(&x, 0).unwrap();
        let yd = y.to_vec();
        let s: f64 = yd.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(yd.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_shift_invariant_numerically(
        vals in proptest::collection::vec(-10.0f64..10.0, 4),
        c in -100.0f64..100.0,
    ) {
        let x = Tensor::new(&[4], vals.clone()).unwrap();
        let shifted = Tensor::new(&[4], vals.iter().map(|v| v + c).collect()).unwrap();
        let tape = Tape::new();
        let a = tape.softmax(&x, 0).unwrap().to_vec();
        let b = tape.softmax(&shifted, 0).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
