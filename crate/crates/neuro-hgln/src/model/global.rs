//! Global graph-learning stream: the learnable dynamic graph built on the
//! spatial prior, stacked GCN layers, and the flattened classification head.

use super::{learned_graph, BoundGlobal};
use crate::autodiff::{KernelError, Tape, TensorId};

/// `A_g = relu((P * A_prior + b) * Q)`: the prior projected into a dynamic
/// functional space. Recomputed every forward pass since it depends only on
/// learnable parameters.
pub fn dynamic_graph(
    tape: &mut Tape,
    p: TensorId,
    q: TensorId,
    b: TensorId,
    prior: TensorId,
) -> Result<TensorId, KernelError> {
    learned_graph(tape, p, q, b, prior)
}

/// Renormalized adjacency `D~^(-1/2) (A + I) D~^(-1/2)`; requires `A >= 0`
/// entrywise so the augmented degrees stay positive.
pub fn normalize_adjacency(tape: &mut Tape, a: TensorId) -> Result<TensorId, KernelError> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(KernelError::BadShape {
            op: "normalize_adjacency",
            shape,
            reason: "expected a square matrix",
        });
    }
    if let Some(idx) = tape.data(a).iter().position(|&v| v < 0.0) {
        return Err(KernelError::NegativeEntry {
            op: "normalize_adjacency",
            index: idx,
        });
    }
    let n = shape[0];
    let eye = tape.eye(n);
    let with_loops = tape.add(a, eye)?;
    let deg = tape.sum_last(with_loops)?;
    let dinv = tape.rsqrt(deg);
    let left = tape.scale_rows(with_loops, dinv)?;
    tape.scale_cols(left, dinv)
}

/// One propagation step `relu(A_norm @ H @ W)`, applied per batch element.
pub fn gcn_layer(
    tape: &mut Tape,
    h: TensorId,
    a_norm: TensorId,
    w: TensorId,
) -> Result<TensorId, KernelError> {
    let mixed = tape.matmul(a_norm, h)?;
    let projected = tape.matmul(mixed, w)?;
    Ok(tape.relu(projected))
}

/// Full global stream: dynamic graph, stacked GCN layers, flatten, FC head.
/// Returns the logits and the (pre-normalization) dynamic graph.
pub fn global_forward(
    tape: &mut Tape,
    params: &BoundGlobal,
    prior: TensorId,
    x: TensorId,
) -> Result<(TensorId, TensorId), KernelError> {
    let a_g = dynamic_graph(tape, params.p, params.q, params.b, prior)?;
    let a_norm = normalize_adjacency(tape, a_g)?;
    let mut h = x;
    for &w in &params.gcn {
        h = gcn_layer(tape, h, a_norm, w)?;
    }
    let flat = tape.flatten_from(h, 1)?;
    let proj = tape.matmul(flat, params.fc_w)?;
    let logits = tape.add_rowvec(proj, params.fc_b)?;
    Ok((logits, a_g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::HostTensor;

    #[test]
    fn dynamic_graph_identity_passthrough() {
        // P = I, Q = I, b = 0 on a non-negative prior returns the prior.
        let n = 3;
        let prior_data: Vec<f64> = (0..9).map(|i| (i as f64 * 0.13).sin().abs()).collect();
        let mut t = Tape::new();
        let p = t.eye(n);
        let q = t.eye(n);
        let b = t.constant(vec![0.0; 9], &[3, 3]).unwrap();
        let prior = t.constant(prior_data.clone(), &[3, 3]).unwrap();
        let a = dynamic_graph(&mut t, p, q, b, prior).unwrap();
        for (got, want) in t.data(a).iter().zip(&prior_data) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_graph_zero_q_is_zero() {
        let mut t = Tape::new();
        let p = t.eye(2);
        let q = t.constant(vec![0.0; 4], &[2, 2]).unwrap();
        let b = t.constant(vec![1.0; 4], &[2, 2]).unwrap();
        let prior = t.constant(vec![0.5; 4], &[2, 2]).unwrap();
        let a = dynamic_graph(&mut t, p, q, b, prior).unwrap();
        assert_eq!(t.data(a), &[0.0; 4]);
    }

    #[test]
    fn dynamic_graph_matches_loop_oracle() {
        // Three-step loop oracle: multiply, add, multiply, clamp.
        let n = 4;
        let gen = |k: f64| -> Vec<f64> {
            (0..n * n).map(|i| ((i as f64 + k) * 0.7).sin()).collect()
        };
        let (pd, qd, bd, ad) = (gen(0.0), gen(1.0), gen(2.0), gen(3.0));
        let mut t = Tape::new();
        let p = t.constant(pd.clone(), &[n, n]).unwrap();
        let q = t.constant(qd.clone(), &[n, n]).unwrap();
        let b = t.constant(bd.clone(), &[n, n]).unwrap();
        let prior = t.constant(ad.clone(), &[n, n]).unwrap();
        let out = dynamic_graph(&mut t, p, q, b, prior).unwrap();

        let mut pa = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    pa[i * n + j] += pd[i * n + k] * ad[k * n + j];
                }
                pa[i * n + j] += bd[i * n + j];
            }
        }
        let mut want = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += pa[i * n + k] * qd[k * n + j];
                }
                want[i * n + j] = s.max(0.0);
            }
        }
        for (g, w) in t.data(out).iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(t.data(out).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn normalize_zero_adjacency_gives_identity() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 9], &[3, 3]).unwrap();
        let out = normalize_adjacency(&mut t, a).unwrap();
        let want = HostTensor::eye(3);
        for (g, w) in t.data(out).iter().zip(&want.data) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_all_ones_frozen_example() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0; 4], &[2, 2]).unwrap();
        let out = normalize_adjacency(&mut t, a).unwrap();
        // A~ = [[2,1],[1,2]], degrees 3 -> [[2/3, 1/3], [1/3, 2/3]].
        let want = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (g, w) in t.data(out).iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_preserves_symmetry() {
        let n = 5;
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = ((i * 7 + j * 3) as f64 * 0.11).sin().abs();
                sym[i * n + j] = v;
                sym[j * n + i] = v;
            }
        }
        let mut t = Tape::new();
        let a = t.constant(sym, &[n, n]).unwrap();
        let out = normalize_adjacency(&mut t, a).unwrap();
        let d = t.data(out);
        let mut asym: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                asym = asym.max((d[i * n + j] - d[j * n + i]).abs());
            }
        }
        assert!(asym < 1e-12, "asymmetry {asym}");
    }

    #[test]
    fn normalize_rejects_negative_entries() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0, -0.1, 0.0, 0.0], &[2, 2]).unwrap();
        assert!(matches!(
            normalize_adjacency(&mut t, a),
            Err(KernelError::NegativeEntry { index: 1, .. })
        ));
    }

    #[test]
    fn gcn_layer_identity_and_relu() {
        let mut t = Tape::new();
        let a = t.eye(2);
        let w = t.eye(3);
        let h_pos = t
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3])
            .unwrap();
        let out = gcn_layer(&mut t, h_pos, a, w).unwrap();
        assert_eq!(t.data(out), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let h_mixed = t
            .constant(vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0], &[1, 2, 3])
            .unwrap();
        let out = gcn_layer(&mut t, h_mixed, a, w).unwrap();
        assert_eq!(t.data(out), &[1.0, 0.0, 3.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn gcn_layer_batch_independence() {
        let n = 3;
        let f = 2;
        let a_data: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.31).cos().abs()).collect();
        let w_data: Vec<f64> = (0..f * f).map(|i| (i as f64 * 0.7).sin()).collect();
        let x1: Vec<f64> = (0..n * f).map(|i| (i as f64 * 0.9).sin()).collect();
        let x2: Vec<f64> = (0..n * f).map(|i| (i as f64 * 1.7).cos()).collect();

        let run = |xs: &[Vec<f64>]| -> Vec<f64> {
            let mut t = Tape::new();
            let a = t.constant(a_data.clone(), &[n, n]).unwrap();
            let w = t.constant(w_data.clone(), &[f, f]).unwrap();
            let flat: Vec<f64> = xs.concat();
            let h = t.constant(flat, &[xs.len(), n, f]).unwrap();
            let out = gcn_layer(&mut t, h, a, w).unwrap();
            t.data(out).to_vec()
        };
        let both = run(&[x1.clone(), x2.clone()]);
        let solo1 = run(&[x1]);
        let solo2 = run(&[x2]);
        assert_eq!(&both[..n * f], &solo1[..]);
        assert_eq!(&both[n * f..], &solo2[..]);
    }
}
