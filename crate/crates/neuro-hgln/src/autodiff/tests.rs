//! Op-level oracle tests: every differentiable op is checked against central
//! finite differences, and the worked examples are frozen here.

use super::*;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Componentwise relative error with an absolute floor, so finite-difference
/// noise on near-zero entries does not dominate.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Deterministic pseudo-random weights; a weighted sum as the test loss
/// catches transposition mistakes a plain sum would miss.
fn probe_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2000) as f64 / 1000.0 - 1.0
        })
        .collect()
}

/// Check d(sum(w .* op(x)))/dx against finite differences.
fn check_grad(build: impl Fn(&mut Tape, TensorId) -> TensorId, x0: &[f64], shape: &[usize]) {
    let run = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let xid = tape.tensor(x.to_vec(), shape, true).unwrap();
        let out = build(&mut tape, xid);
        let w = probe_weights(tape.numel(out), 7);
        let wid = tape.constant(w, tape.shape(out).to_vec().as_slice()).unwrap();
        let prod = tape.mul(out, wid).unwrap();
        let loss = tape.sum_all(prod);
        tape.value(loss)
    };
    let mut tape = Tape::new();
    let xid = tape.tensor(x0.to_vec(), shape, true).unwrap();
    let out = build(&mut tape, xid);
    let w = probe_weights(tape.numel(out), 7);
    let wid = tape.constant(w, tape.shape(out).to_vec().as_slice()).unwrap();
    let prod = tape.mul(out, wid).unwrap();
    let loss = tape.sum_all(prod);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(xid).expect("gradient populated").to_vec();
    let numeric = fd_grad(run, x0, FD_H);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        assert!(
            rel_err(*a, *n) < FD_TOL,
            "component {i}: analytic {a} vs numeric {n}"
        );
    }
}

fn seq(n: usize, scale: f64, offset: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin() * scale + offset).collect()
}

// ── matmul ──────────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut t = Tape::new();
    let i2 = t.eye(2);
    let m = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let out = t.matmul(i2, m).unwrap();
    assert_eq!(t.data(out), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_orthogonal_supports() {
    let mut t = Tape::new();
    let a = t.constant(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
    let b = t.constant(vec![0.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let out = t.matmul(a, b).unwrap();
    assert_eq!(t.data(out), &[0.0; 4]);
}

#[test]
fn matmul_grad_frozen_example() {
    // d sum(a @ b) / d a at a = I2, b = [[1,2],[3,4]] -> [[3,7],[3,7]],
    // cross-checked against central differences below.
    let b_data = vec![1.0, 2.0, 3.0, 4.0];
    let mut t = Tape::new();
    let a = t.tensor(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], true).unwrap();
    let b = t.constant(b_data.clone(), &[2, 2]).unwrap();
    let prod = t.matmul(a, b).unwrap();
    let loss = t.sum_all(prod);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(a).unwrap(), &[3.0, 7.0, 3.0, 7.0]);

    let numeric = fd_grad(
        |x| {
            let mut t = Tape::new();
            let a = t.tensor(x.to_vec(), &[2, 2], true).unwrap();
            let b = t.constant(b_data.clone(), &[2, 2]).unwrap();
            let prod = t.matmul(a, b).unwrap();
            let loss = t.sum_all(prod);
            t.value(loss)
        },
        &[1.0, 0.0, 0.0, 1.0],
        1e-6,
    );
    for (a, n) in [3.0, 7.0, 3.0, 7.0].iter().zip(&numeric) {
        assert!(rel_err(*a, *n) < FD_TOL);
    }
}

#[test]
fn matmul_shape_error_names_both() {
    let mut t = Tape::new();
    let a = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
    let b = t.constant(vec![0.0; 4], &[2, 2]).unwrap();
    match t.matmul(a, b) {
        Err(KernelError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_batched_matches_naive_loop() {
    // [2, 3, 4] @ [4, 2] shared rhs, and dA/dB via fd.
    let x0 = seq(24, 1.0, 0.0);
    let w = seq(8, 0.5, 0.1);
    check_grad(
        |t, x| {
            let wid = t.constant(w.clone(), &[4, 2]).unwrap();
            t.matmul(x, wid).unwrap()
        },
        &x0,
        &[2, 3, 4],
    );
    // Naive oracle for the forward values.
    let mut t = Tape::new();
    let a = t.constant(x0.clone(), &[2, 3, 4]).unwrap();
    let b = t.constant(w.clone(), &[4, 2]).unwrap();
    let out = t.matmul(a, b).unwrap();
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += x0[bi * 12 + i * 4 + p] * w[p * 2 + j];
                }
                let got = t.data(out)[bi * 6 + i * 2 + j];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_rhs_batched_lhs_shared() {
    let a = seq(6, 1.0, 0.0); // [2,3]
    let x0 = seq(2 * 3 * 2, 1.0, 0.0); // [2,3,2]
    check_grad(
        |t, x| {
            let aid = t.constant(a.clone(), &[2, 3]).unwrap();
            t.matmul(aid, x).unwrap()
        },
        &x0,
        &[2, 3, 2],
    );
}

#[test]
fn matmul_nt_matches_explicit_transpose() {
    let a = seq(12, 1.0, 0.0);
    let b = seq(8, 1.0, 0.2);
    let mut t = Tape::new();
    let aid = t.constant(a.clone(), &[3, 4]).unwrap();
    let bid = t.constant(b.clone(), &[2, 4]).unwrap();
    let nt = t.matmul_nt(aid, bid, 0.5).unwrap();
    let bt = t.transpose(bid).unwrap();
    let nn = t.matmul(aid, bt).unwrap();
    let nn_scaled = t.scale(nn, 0.5);
    for (x, y) in t.data(nt).iter().zip(t.data(nn_scaled)) {
        assert!((x - y).abs() < 1e-14);
    }
    check_grad(
        |t, x| {
            let bid = t.constant(b.clone(), &[2, 4]).unwrap();
            t.matmul_nt(x, bid, 0.37).unwrap()
        },
        &a,
        &[3, 4],
    );
    check_grad(
        |t, x| {
            let aid = t.constant(a.clone(), &[3, 4]).unwrap();
            t.matmul_nt(aid, x, 0.37).unwrap()
        },
        &b,
        &[2, 4],
    );
}

// ── activations ─────────────────────────────────────────────────────────

#[test]
fn relu_examples() {
    let mut t = Tape::new();
    let x = t.constant(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
    let y = t.relu(x);
    assert_eq!(t.data(y), &[0.0, 0.0, 2.0]);

    let x = t.constant(vec![-3.0, -0.5, -1e-9], &[3]).unwrap();
    let y = t.relu(x);
    assert!(t.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_is_indicator_mask() {
    // Away from the kink the gradient is exactly the x>0 indicator.
    let x0 = vec![-2.0, -0.7, 0.4, 1.9, -0.01, 0.01];
    check_grad(|t, x| t.relu(x), &x0, &[6]);
    let mut t = Tape::new();
    let x = t.tensor(x0.clone(), &[6], true).unwrap();
    let y = t.relu(x);
    let loss = t.sum_all(y);
    t.backward(loss).unwrap();
    let g = t.grad(x).unwrap();
    for (gv, xv) in g.iter().zip(&x0) {
        assert_eq!(*gv, if *xv > 0.0 { 1.0 } else { 0.0 });
    }
}

/// Independent standard-normal CDF oracle: the classical series
/// `Phi(x) = 1/2 + pdf(x) * (x + x^3/3 + x^5/(3*5) + ...)`, no erf involved.
fn phi_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for k in 1..200 {
        term *= x * x / (2.0 * k as f64 + 1.0);
        sum += term;
        if term.abs() < 1e-18 {
            break;
        }
    }
    0.5 + norm_pdf(x) * sum
}

#[test]
fn gelu_matches_phi_series_oracle() {
    let mut t = Tape::new();
    for &x in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
        let xid = t.constant(vec![x], &[1]).unwrap();
        let y = t.gelu(xid);
        let want = x * phi_series(x);
        assert!(
            (t.data(y)[0] - want).abs() < 1e-12,
            "gelu({x}) = {} vs series {want}",
            t.data(y)[0]
        );
    }
}

#[test]
fn gelu_gradient_closed_form_at_one() {
    // d/dx [x * Phi(x)] at 1 = Phi(1) + pdf(1) ~ 0.8413 + 0.2420 = 1.0833.
    let mut t = Tape::new();
    let x = t.tensor(vec![1.0], &[1], true).unwrap();
    let y = t.gelu(x);
    let loss = t.sum_all(y);
    t.backward(loss).unwrap();
    let g = t.grad(x).unwrap()[0];
    assert!((g - 1.0833154705876864).abs() < 1e-10, "got {g}");
    check_grad(|t, x| t.gelu(x), &[-1.3, -0.4, 0.0, 0.6, 1.7], &[5]);
}

#[test]
fn ln_and_rsqrt_gradients() {
    check_grad(|t, x| t.ln(x), &[0.3, 1.0, 2.5, 7.0], &[4]);
    check_grad(|t, x| t.rsqrt(x), &[0.4, 1.0, 3.0, 9.0], &[4]);
}

// ── softmax ─────────────────────────────────────────────────────────────

#[test]
fn softmax_symmetry_and_closed_form() {
    let mut t = Tape::new();
    let x = t.constant(vec![0.0, 0.0], &[1, 2]).unwrap();
    let y = t.softmax_rows(x).unwrap();
    assert_eq!(t.data(y), &[0.5, 0.5]);

    let x = t.constant(vec![1.0, 0.0], &[1, 2]).unwrap();
    let y = t.softmax_rows(x).unwrap();
    let e = std::f64::consts::E;
    assert!((t.data(y)[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((t.data(y)[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
}

#[test]
fn softmax_gradient_fd() {
    check_grad(
        |t, x| t.softmax_rows(x).unwrap(),
        &seq(12, 2.0, 0.0),
        &[3, 4],
    );
}

#[test]
fn softmax_huge_inputs_stable() {
    let mut t = Tape::new();
    let x = t.constant(vec![1000.0, 0.0, -1000.0], &[1, 3]).unwrap();
    let y = t.softmax_rows(x).unwrap();
    assert!(t.data(y).iter().all(|v| v.is_finite()));
    assert!((t.data(y).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

// ── layer norm ──────────────────────────────────────────────────────────

fn unit_affine(t: &mut Tape, d: usize) -> (TensorId, TensorId) {
    let gain = t.constant(vec![1.0; d], &[d]).unwrap();
    let bias = t.constant(vec![0.0; d], &[d]).unwrap();
    (gain, bias)
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut t = Tape::new();
    let (g, b) = unit_affine(&mut t, 3);
    let x = t.constant(vec![1.0, 1.0, 1.0], &[1, 3]).unwrap();
    let y = t.layer_norm(x, g, b).unwrap();
    assert!(t.data(y).iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn layer_norm_two_point_row() {
    let mut t = Tape::new();
    let (g, b) = unit_affine(&mut t, 2);
    let x = t.constant(vec![0.0, 2.0], &[1, 2]).unwrap();
    let y = t.layer_norm(x, g, b).unwrap();
    assert!((t.data(y)[0] + 1.0).abs() < 1e-4);
    assert!((t.data(y)[1] - 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_idempotent_with_unit_affine() {
    // Rows with near-unit variance: the second pass must be a no-op. (With
    // eps inside the root, exact idempotence needs the input row variance
    // close to 1, which is what "already normalized" means here.)
    let mut t = Tape::new();
    let (g, b) = unit_affine(&mut t, 5);
    let x = t
        .constant(
            vec![0.0, 2.0, 0.0, 2.0, 0.0, -1.0, 1.0, -1.0, 1.0, 1.0],
            &[2, 5],
        )
        .unwrap();
    let y1 = t.layer_norm(x, g, b).unwrap();
    let y2 = t.layer_norm(y1, g, b).unwrap();
    for (a, bb) in t.data(y1).iter().zip(t.data(y2)) {
        assert!((a - bb).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_degenerate_axis_rejected() {
    let mut t = Tape::new();
    let (g, b) = unit_affine(&mut t, 1);
    let x = t.constant(vec![1.0], &[1, 1]).unwrap();
    assert!(matches!(
        t.layer_norm(x, g, b),
        Err(KernelError::DegenerateAxis { .. })
    ));
}

#[test]
fn layer_norm_statistics_for_wide_rows() {
    let mut t = Tape::new();
    let (g, b) = unit_affine(&mut t, 8);
    let x = t.constant(seq(16, 4.0, -1.0), &[2, 8]).unwrap();
    let y = t.layer_norm(x, g, b).unwrap();
    for r in 0..2 {
        let row = &t.data(y)[r * 8..(r + 1) * 8];
        let mu = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
        assert!(mu.abs() < 1e-9, "row mean {mu}");
        assert!((var - 1.0).abs() < 1e-3, "row var {var}");
    }
}

#[test]
fn layer_norm_gradient_fd_all_inputs() {
    let x0 = seq(12, 2.0, 0.5);
    check_grad(
        |t, x| {
            let (g, b) = unit_affine(t, 4);
            t.layer_norm(x, g, b).unwrap()
        },
        &x0,
        &[3, 4],
    );
    // Gain and bias paths.
    let gain0 = vec![1.2, 0.8, -0.5, 2.0];
    check_grad(
        |t, g| {
            let x = t.constant(x0.clone(), &[3, 4]).unwrap();
            let b = t.constant(vec![0.1, -0.2, 0.3, 0.0], &[4]).unwrap();
            t.layer_norm(x, g, b).unwrap()
        },
        &gain0,
        &[4],
    );
}

// ── batch norm ──────────────────────────────────────────────────────────

#[test]
fn batch_norm_eval_identity_regime() {
    let mut t = Tape::new();
    let mut stat = BnStat::identity(4);
    let x0 = seq(8, 1.5, 0.2);
    let x = t.constant(x0.clone(), &[2, 4]).unwrap();
    let y = t.batch_norm(x, &mut stat, BnMode::Eval).unwrap();
    let scale = 1.0 / (1.0 + BATCH_NORM_EPS).sqrt();
    for (yv, xv) in t.data(y).iter().zip(&x0) {
        assert!((yv - xv * scale).abs() < 1e-12);
    }
    // Eval never touches the running state.
    assert_eq!(stat, BnStat::identity(4));
}

#[test]
fn batch_norm_train_two_point_batch() {
    let mut t = Tape::new();
    let mut stat = BnStat::identity(1);
    let x = t.constant(vec![-1.0, 1.0], &[2, 1]).unwrap();
    let y = t.batch_norm(x, &mut stat, BnMode::Train).unwrap();
    assert!((t.data(y)[0] + 1.0).abs() < 1e-3);
    assert!((t.data(y)[1] - 1.0).abs() < 1e-3);
}

#[test]
fn batch_norm_running_update_momentum() {
    let mut t = Tape::new();
    let mut stat = BnStat {
        mean: vec![0.0],
        var: vec![1.0],
    };
    let x = t.constant(vec![2.0, 4.0], &[2, 1]).unwrap();
    t.batch_norm(x, &mut stat, BnMode::Train).unwrap();
    // batch mean 3, biased batch var 1.
    assert!((stat.mean[0] - (0.9 * 0.0 + 0.1 * 3.0)).abs() < 1e-12);
    assert!((stat.var[0] - (0.9 * 1.0 + 0.1 * 1.0)).abs() < 1e-12);
}

#[test]
fn batch_norm_single_sample_train_rejected() {
    let mut t = Tape::new();
    let mut stat = BnStat::identity(2);
    let x = t.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
    assert!(matches!(
        t.batch_norm(x, &mut stat, BnMode::Train),
        Err(KernelError::InsufficientBatch { batch: 1, .. })
    ));
}

#[test]
fn batch_norm_gradient_fd_both_modes() {
    let x0 = seq(12, 2.0, 0.3);
    check_grad(
        |t, x| {
            let mut stat = BnStat::identity(4);
            t.batch_norm(x, &mut stat, BnMode::Train).unwrap()
        },
        &x0,
        &[3, 4],
    );
    check_grad(
        |t, x| {
            let mut stat = BnStat {
                mean: vec![0.1, -0.4, 0.2, 0.9],
                var: vec![1.3, 0.7, 2.0, 0.5],
            };
            t.batch_norm(x, &mut stat, BnMode::Eval).unwrap()
        },
        &x0,
        &[3, 4],
    );
}

// ── cross entropy ───────────────────────────────────────────────────────

#[test]
fn cross_entropy_closed_form_and_stability() {
    let mut t = Tape::new();
    let x = t.constant(vec![0.0, 0.0], &[1, 2]).unwrap();
    let l = t.cross_entropy_logits(x, &[0]).unwrap();
    assert!((t.value(l) - std::f64::consts::LN_2).abs() < 1e-12);

    let x = t.constant(vec![1000.0, 0.0], &[1, 2]).unwrap();
    let l = t.cross_entropy_logits(x, &[0]).unwrap();
    assert!(t.value(l).is_finite());
    assert!(t.value(l).abs() < 1e-9);

    let x = t.constant(vec![0.0, 1000.0], &[1, 2]).unwrap();
    let l = t.cross_entropy_logits(x, &[0]).unwrap();
    assert!((t.value(l) - 1000.0).abs() < 1e-6);
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut t = Tape::new();
    let x = t.constant(vec![0.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
    match t.cross_entropy_logits(x, &[0, 5]) {
        Err(KernelError::LabelOutOfRange { index, label, classes }) => {
            assert_eq!((index, label, classes), (1, 5, 2));
        }
        other => panic!("expected label error, got {other:?}"),
    }
}

#[test]
fn cross_entropy_gradient_fd() {
    check_grad(
        |t, x| {
            let l = t.cross_entropy_logits(x, &[2, 0, 1]).unwrap();
            // Wrap the scalar so the weighted-sum harness applies cleanly.
            t.reshape(l, &[1]).unwrap()
        },
        &seq(9, 1.5, 0.0),
        &[3, 3],
    );
}

// ── shape ops and reductions ────────────────────────────────────────────

#[test]
fn transpose_concat_reshape_gradients() {
    check_grad(|t, x| t.transpose(x).unwrap(), &seq(6, 1.0, 0.0), &[2, 3]);
    check_grad(
        |t, x| {
            let other = t.constant(seq(4, 0.5, 0.1), &[2, 2]).unwrap();
            t.concat_last(&[x, other]).unwrap()
        },
        &seq(6, 1.0, 0.0),
        &[2, 3],
    );
    check_grad(|t, x| t.reshape(x, &[3, 2]).unwrap(), &seq(6, 1.0, 0.0), &[2, 3]);
}

#[test]
fn concat_shape_mismatch_rejected() {
    let mut t = Tape::new();
    let a = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
    let b = t.constant(vec![0.0; 6], &[3, 2]).unwrap();
    assert!(matches!(
        t.concat_last(&[a, b]),
        Err(KernelError::ShapeMismatch { .. })
    ));
}

#[test]
fn reductions_and_scaling_gradients() {
    let x0 = seq(6, 1.3, 0.2);
    check_grad(
        |t, x| {
            let s = t.sum_all(x);
            t.reshape(s, &[1]).unwrap()
        },
        &x0,
        &[2, 3],
    );
    check_grad(
        |t, x| {
            let s = t.mean_all(x);
            t.reshape(s, &[1]).unwrap()
        },
        &x0,
        &[2, 3],
    );
    check_grad(|t, x| t.sum_last(x).unwrap(), &x0, &[2, 3]);
    check_grad(
        |t, x| {
            let s = t.frobenius_sq(x);
            t.reshape(s, &[1]).unwrap()
        },
        &x0,
        &[2, 3],
    );
    let v = vec![0.7, -1.2];
    check_grad(
        |t, x| {
            let vid = t.constant(v.clone(), &[2]).unwrap();
            t.scale_rows(x, vid).unwrap()
        },
        &x0,
        &[2, 3],
    );
    check_grad(
        |t, x| {
            let vid = t.constant(vec![0.3, -0.8, 1.1], &[3]).unwrap();
            t.scale_cols(x, vid).unwrap()
        },
        &x0,
        &[2, 3],
    );
    check_grad(
        |t, x| {
            let vid = t.constant(vec![0.5, 0.25, -0.75], &[3]).unwrap();
            t.add_rowvec(x, vid).unwrap()
        },
        &x0,
        &[2, 3],
    );
}

#[test]
fn split_merge_heads_roundtrip_and_grad() {
    let x0 = seq(2 * 3 * 4, 1.0, 0.0);
    let mut t = Tape::new();
    let x = t.constant(x0.clone(), &[2, 3, 4]).unwrap();
    let s = t.split_heads(x, 2).unwrap();
    assert_eq!(t.shape(s), &[4, 3, 2]);
    let m = t.merge_heads(s, 2).unwrap();
    assert_eq!(t.data(m), &x0[..]);
    check_grad(|t, x| t.split_heads(x, 2).unwrap(), &x0, &[2, 3, 4]);
    check_grad(|t, x| t.merge_heads(x, 2).unwrap(), &x0, &[4, 3, 2]);
}

// ── backward semantics ──────────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut t = Tape::new();
    let x = t.tensor(seq(5, 2.0, 0.0), &[5], true).unwrap();
    let loss = t.sum_all(x);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 5]);
}

#[test]
fn backward_quadratic() {
    let mut t = Tape::new();
    let x = t.tensor(vec![1.0, 2.0], &[2], true).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum_all(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_accumulates_across_consumers() {
    // x feeds both sum(x) and sum(x*x); total grad must equal the sum of the
    // two single-path gradients.
    let x0 = vec![0.5, -1.5, 2.0];
    let mut t = Tape::new();
    let x = t.tensor(x0.clone(), &[3], true).unwrap();
    let s1 = t.sum_all(x);
    let sq = t.mul(x, x).unwrap();
    let s2 = t.sum_all(sq);
    let total = t.add(s1, s2).unwrap();
    t.backward(total).unwrap();
    let g = t.grad(x).unwrap().to_vec();
    for (gv, xv) in g.iter().zip(&x0) {
        assert!((gv - (1.0 + 2.0 * xv)).abs() < 1e-12);
    }
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut t = Tape::new();
    let x = t.tensor(vec![3.0], &[1], true).unwrap();
    let loss = t.sum_all(x);
    t.backward(loss).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0]);
    t.zero_grads();
    assert!(t.grad(x).is_none());
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut t = Tape::new();
    let x = t.tensor(vec![1.0, 2.0], &[2], true).unwrap();
    assert!(matches!(
        t.backward(x),
        Err(KernelError::NonScalarRoot { .. })
    ));
}

#[test]
fn no_grad_without_requires_grad() {
    let mut t = Tape::new();
    let x = t.constant(vec![1.0, 2.0], &[2]).unwrap();
    let loss = t.sum_all(x);
    t.backward(loss).unwrap();
    assert!(t.grad(x).is_none());
}

// ── property tests ──────────────────────────────────────────────────────

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..8, seed in 0u64..1000) {
            let w = probe_weights(rows * cols, seed);
            let x: Vec<f64> = w.iter().map(|v| v * 10.0).collect();
            let mut t = Tape::new();
            let xid = t.constant(x, &[rows, cols]).unwrap();
            let y = t.softmax_rows(xid).unwrap();
            for r in 0..rows {
                let row = &t.data(y)[r * cols..(r + 1) * cols];
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 || cols == 1));
            }
        }

        #[test]
        fn softmax_shift_invariant(cols in 2usize..8, c in -50.0f64..50.0, seed in 0u64..1000) {
            let x = probe_weights(cols, seed);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let mut t = Tape::new();
            let a = t.constant(x, &[1, cols]).unwrap();
            let b = t.constant(shifted, &[1, cols]).unwrap();
            let ya = t.softmax_rows(a).unwrap();
            let yb = t.softmax_rows(b).unwrap();
            for (u, v) in t.data(ya).iter().zip(t.data(yb)) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
