//! Hierarchical local-region stream: per-region attention-proposed graphs,
//! local-constrained parallel GCNs, and feature-axis aggregation.
//!
//! Region graphs are full N x N matrices built purely from parameters and the
//! spatial prior; the optional mask flag restricts them to each region's own
//! electrodes before normalization.

use super::encoder;
use super::global::normalize_adjacency;
use super::{learned_graph, BoundLocal, BoundRegion, BnState, Mode, ModelDims};
use crate::autodiff::{BnMode, BnStat, HostTensor, KernelError, Tape, TensorId};

/// `A_k = relu((P_k * A_prior + b_k) * Q_k)`: the learned semantic embedding
/// of region k's topology.
pub fn region_embedding(
    tape: &mut Tape,
    p: TensorId,
    q: TensorId,
    b: TensorId,
    prior: TensorId,
) -> Result<TensorId, KernelError> {
    learned_graph(tape, p, q, b, prior)
}

/// Raw attention scores `S_h = (A W_Q)(A W_K)^T / sqrt(d_k)`. The graph
/// embedding itself plays query and key; there is no value projection.
pub fn attention_scores(
    tape: &mut Tape,
    a_k: TensorId,
    wq: TensorId,
    wk: TensorId,
    head_dim: usize,
) -> Result<TensorId, KernelError> {
    let q = tape.matmul(a_k, wq)?;
    let k = tape.matmul(a_k, wk)?;
    tape.matmul_nt(q, k, 1.0 / (head_dim as f64).sqrt())
}

/// `A_local^k = sum_h relu(BN(softmax_rows(S_h)))`, entrywise non-negative.
/// The batch norm treats the map's rows as the batch axis (per-column
/// statistics, one state per head); eval mode uses the running statistics.
pub fn propose_local_graph(
    tape: &mut Tape,
    region: &BoundRegion,
    dims: &ModelDims,
    prior: TensorId,
    bn: &mut [BnStat],
    mode: Mode,
    mask: Option<&HostTensor>,
) -> Result<TensorId, KernelError> {
    let a_k = region_embedding(tape, region.p, region.q, region.b, prior)?;
    let bn_mode = match mode {
        Mode::Train => BnMode::Train,
        Mode::Eval => BnMode::Eval,
    };
    let mut acc: Option<TensorId> = None;
    for h in 0..dims.heads {
        let s = attention_scores(tape, a_k, region.wq[h], region.wk[h], dims.attn_head_dim)?;
        let sm = tape.softmax_rows(s)?;
        let normed = tape.batch_norm(sm, &mut bn[h], bn_mode)?;
        let rect = tape.relu(normed);
        acc = Some(match acc {
            None => rect,
            Some(prev) => tape.add(prev, rect)?,
        });
    }
    let mut graph = acc.expect("head count is at least 1");
    if let Some(m) = mask {
        let mid = tape.leaf_host(m, false);
        graph = tape.mul(graph, mid)?;
    }
    Ok(graph)
}

/// `H_k = gelu(normalize(A_local^k) @ X @ W_k)` per batch element.
pub fn local_gcn(
    tape: &mut Tape,
    a_local: TensorId,
    x: TensorId,
    w: TensorId,
) -> Result<TensorId, KernelError> {
    let a_norm = normalize_adjacency(tape, a_local)?;
    let mixed = tape.matmul(a_norm, x)?;
    let projected = tape.matmul(mixed, w)?;
    Ok(tape.gelu(projected))
}

/// Feature-axis concatenation in region-index order; every branch must share
/// the same width so `K * d' = d_model` holds exactly.
pub fn concat_regions(tape: &mut Tape, parts: &[TensorId]) -> Result<TensorId, KernelError> {
    assert!(!parts.is_empty(), "concat_regions: no branches");
    let w0 = *tape.shape(parts[0]).last().unwrap();
    for &p in parts {
        let w = *tape.shape(p).last().unwrap();
        if w != w0 {
            return Err(KernelError::ShapeMismatch {
                op: "concat_regions",
                lhs: tape.shape(parts[0]).to_vec(),
                rhs: tape.shape(p).to_vec(),
            });
        }
    }
    tape.concat_last(parts)
}

/// The full local stream. Returns the logits and the K proposed graphs (for
/// the geometric and diversity terms of the objective).
#[allow(clippy::too_many_arguments)]
pub fn local_forward(
    tape: &mut Tape,
    params: &BoundLocal,
    dims: &ModelDims,
    prior: TensorId,
    x: TensorId,
    bn: &mut BnState,
    mode: Mode,
    masks: Option<&[HostTensor]>,
) -> Result<(TensorId, Vec<TensorId>), KernelError> {
    let mut graphs = Vec::with_capacity(dims.regions);
    let mut branches = Vec::with_capacity(dims.regions);
    for k in 0..dims.regions {
        let graph = propose_local_graph(
            tape,
            &params.regions[k],
            dims,
            prior,
            &mut bn.stats[k],
            mode,
            masks.map(|m| &m[k]),
        )?;
        let h = local_gcn(tape, graph, x, params.w_gcn[k])?;
        graphs.push(graph);
        branches.push(h);
    }
    let mut z = concat_regions(tape, &branches)?;
    for layer in &params.encoder {
        z = encoder::encoder_layer(tape, z, layer, dims)?;
    }
    let logits = encoder::local_head(
        tape,
        z,
        params.head_w1,
        params.head_b1,
        params.head_w2,
        params.head_b2,
    )?;
    Ok((logits, graphs))
}
