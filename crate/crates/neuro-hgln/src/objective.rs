//! Decision fusion and the four-term joint objective: two cross-entropies
//! (deep supervision of both heads), a KL geometric constraint anchoring the
//! learned region graphs to the spatial prior, and a pairwise diversity
//! penalty that keeps the region topologies from collapsing into one pattern.

use crate::autodiff::{KernelError, Tape, TensorId};
use serde::{Deserialize, Serialize};

/// Epsilon guarding the logarithm of the learned distribution in the KL term.
pub const KL_EPS: f64 = 1e-8;

/// Weights of the four objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Geometric (KL) constraint.
    pub alpha: f64,
    /// Functional diversity.
    pub beta: f64,
    /// Global-stream cross-entropy.
    pub gamma: f64,
    /// Local-stream cross-entropy.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1e-3,
            beta: 0.025,
            gamma: 10.0,
            delta: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(v >= 0.0) {
                return Err(format!("loss weight {name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// The four objective terms and their weighted total for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_global: f64,
    pub l_local: f64,
    pub l_dist: f64,
    pub l_div: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recompute the weighted total from the components.
    pub fn reconstruct(&self, w: &LossWeights) -> f64 {
        w.alpha * self.l_dist + w.beta * self.l_div + w.gamma * self.l_global + w.delta * self.l_local
    }

    pub fn is_finite(&self) -> bool {
        self.l_global.is_finite()
            && self.l_local.is_finite()
            && self.l_dist.is_finite()
            && self.l_div.is_finite()
            && self.total.is_finite()
    }
}

/// Arithmetic mean of the two streams' logits, row by row.
pub fn fuse_logits(y_global: &[f64], y_local: &[f64]) -> Result<Vec<f64>, KernelError> {
    if y_global.len() != y_local.len() {
        return Err(KernelError::ShapeMismatch {
            op: "fuse_logits",
            lhs: vec![y_global.len()],
            rhs: vec![y_local.len()],
        });
    }
    Ok(y_global
        .iter()
        .zip(y_local)
        .map(|(g, l)| 0.5 * (g + l))
        .collect())
}

/// Argmax with ties broken by the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax turning an adjacency into per-node distributions.
pub fn row_distribution(tape: &mut Tape, a: TensorId) -> Result<TensorId, KernelError> {
    tape.softmax_rows(a)
}

/// `sum_k sum_i KL(p_i || q_i^k)` where p/q are the row distributions of the
/// prior and of each learned graph; epsilon guards the q logarithm. The
/// epsilon skews the raw sum by -O(eps) at perfect alignment, so the result
/// is clamped at zero to keep the term non-negative.
pub fn geometric_kl(
    tape: &mut Tape,
    prior: TensorId,
    graphs: &[TensorId],
) -> Result<TensorId, KernelError> {
    let p = row_distribution(tape, prior)?;
    let ln_p = tape.ln(p);
    let mut total: Option<TensorId> = None;
    for &g in graphs {
        let q = row_distribution(tape, g)?;
        let q_eps = tape.add_scalar(q, KL_EPS);
        let ln_q = tape.ln(q_eps);
        let diff = tape.sub(ln_p, ln_q)?;
        let weighted = tape.mul(p, diff)?;
        let s = tape.sum_all(weighted);
        total = Some(match total {
            None => s,
            Some(prev) => tape.add(prev, s)?,
        });
    }
    Ok(match total {
        Some(t) => tape.relu(t),
        None => tape.scalar_const(0.0),
    })
}

/// `sum_{i<j} ||A_i .* A_j||_F^2`; zero for a single graph.
pub fn diversity_loss(tape: &mut Tape, graphs: &[TensorId]) -> Result<TensorId, KernelError> {
    let mut total: Option<TensorId> = None;
    for i in 0..graphs.len() {
        for j in (i + 1)..graphs.len() {
            let prod = tape.mul(graphs[i], graphs[j])?;
            let sq = tape.frobenius_sq(prod);
            total = Some(match total {
                None => sq,
                Some(prev) => tape.add(prev, sq)?,
            });
        }
    }
    Ok(total.unwrap_or_else(|| tape.scalar_const(0.0)))
}

/// Inputs to the total objective; absent streams contribute exact zeros.
pub struct LossInputs<'a> {
    pub y_global: Option<TensorId>,
    pub y_local: Option<TensorId>,
    pub labels: &'a [usize],
    pub prior: TensorId,
    pub graphs: &'a [TensorId],
}

/// Assemble the weighted total on the tape and report the breakdown.
/// Returns the scalar root for backward plus the numeric breakdown.
pub fn total_loss(
    tape: &mut Tape,
    inputs: &LossInputs<'_>,
    w: &LossWeights,
) -> Result<(TensorId, LossBreakdown), KernelError> {
    let zero = tape.scalar_const(0.0);
    let l_global = match inputs.y_global {
        Some(y) => tape.cross_entropy_logits(y, inputs.labels)?,
        None => zero,
    };
    let (l_dist, l_div, l_local) = match inputs.y_local {
        Some(y) => {
            let l_local = tape.cross_entropy_logits(y, inputs.labels)?;
            let l_dist = geometric_kl(tape, inputs.prior, inputs.graphs)?;
            let l_div = diversity_loss(tape, inputs.graphs)?;
            (l_dist, l_div, l_local)
        }
        None => (zero, zero, zero),
    };
    let sa = tape.scale(l_dist, w.alpha);
    let sb = tape.scale(l_div, w.beta);
    let sg = tape.scale(l_global, w.gamma);
    let sl = tape.scale(l_local, w.delta);
    let ab = tape.add(sa, sb)?;
    let gl = tape.add(sg, sl)?;
    let total = tape.add(ab, gl)?;
    let breakdown = LossBreakdown {
        l_global: tape.value(l_global),
        l_local: tape.value(l_local),
        l_dist: tape.value(l_dist),
        l_div: tape.value(l_div),
        total: tape.value(total),
    };
    Ok((total, breakdown))
}

/// Mean pairwise overlap of unit-Frobenius-normalized graphs,
/// `sum_{i<j} ||A^_i .* A^_j||_F^2` — the topology-level redundancy measure.
pub fn normalized_graph_overlap(graphs: &[Vec<f64>]) -> f64 {
    let norms: Vec<f64> = graphs
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    for i in 0..graphs.len() {
        for j in (i + 1)..graphs.len() {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let s: f64 = graphs[i]
                .iter()
                .zip(&graphs[j])
                .map(|(a, b)| {
                    let p = (a / norms[i]) * (b / norms[j]);
                    p * p
                })
                .sum();
            total += s;
        }
    }
    total
}
