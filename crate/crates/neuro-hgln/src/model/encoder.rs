//! Dimension-as-token encoder: each electrode's feature vector is one token,
//! so self-attention models cross-channel dependencies. No positional
//! encoding — the channels form an unordered set and the feature bands
//! already encode region identity.

use super::{BoundEncoderLayer, ModelDims};
use crate::autodiff::{KernelError, Tape, TensorId};

/// Multi-head self-attention over the N channel tokens. Returns the output
/// projection and the attention probabilities (`[batch*heads, N, N]`).
pub fn msa(
    tape: &mut Tape,
    z: TensorId,
    layer: &BoundEncoderLayer,
    dims: &ModelDims,
) -> Result<(TensorId, TensorId), KernelError> {
    let q = tape.matmul(z, layer.wq)?;
    let k = tape.matmul(z, layer.wk)?;
    let v = tape.matmul(z, layer.wv)?;
    let qh = tape.split_heads(q, dims.heads)?;
    let kh = tape.split_heads(k, dims.heads)?;
    let vh = tape.split_heads(v, dims.heads)?;
    let head_width = dims.d_model / dims.heads;
    let scores = tape.matmul_nt(qh, kh, 1.0 / (head_width as f64).sqrt())?;
    let probs = tape.softmax_rows(scores)?;
    let ctx = tape.matmul(probs, vh)?;
    let merged = tape.merge_heads(ctx, dims.heads)?;
    let out = tape.matmul(merged, layer.wo)?;
    Ok((out, probs))
}

/// Post-norm residual block: `Z' = LN(Z + MSA(Z)); out = LN(Z' + FFN(Z'))`
/// with `FFN(z) = gelu(z W1) W2`.
pub fn encoder_layer(
    tape: &mut Tape,
    z: TensorId,
    layer: &BoundEncoderLayer,
    dims: &ModelDims,
) -> Result<TensorId, KernelError> {
    let (attn, _probs) = msa(tape, z, layer, dims)?;
    let res1 = tape.add(z, attn)?;
    let z1 = tape.layer_norm(res1, layer.ln1_g, layer.ln1_b)?;
    let hidden = tape.matmul(z1, layer.ffn1)?;
    let act = tape.gelu(hidden);
    let ffn = tape.matmul(act, layer.ffn2)?;
    let res2 = tape.add(z1, ffn)?;
    tape.layer_norm(res2, layer.ln2_g, layer.ln2_b)
}

/// MLP projection head: `y = flatten(gelu(Z W1 + b1)) W2 + b2`.
pub fn local_head(
    tape: &mut Tape,
    z: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
) -> Result<TensorId, KernelError> {
    let proj = tape.matmul(z, w1)?;
    let shifted = tape.add_rowvec(proj, b1)?;
    let act = tape.gelu(shifted);
    let flat = tape.flatten_from(act, 1)?;
    let out = tape.matmul(flat, w2)?;
    tape.add_rowvec(out, b2)
}
