//! The gradient tape: an arena of tensors plus the ordered record of the ops
//! that produced them.
//!
//! Ops append nodes, so the record is topologically sorted by construction and
//! the reverse sweep visits each node exactly once. A node's gradient is only
//! materialized if it (transitively) requires gradients.

use super::gemm::{gemm, Trans};
use super::{norm_cdf, norm_pdf, BnMode, BnStat, HostTensor, KernelError};
use super::{BATCH_NORM_EPS, LAYER_NORM_EPS};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[batch?, m, k] @ [batch?, k, n]`; `a_per`/`b_per` are per-item strides
    /// (0 when that operand is shared across the batch).
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_per: usize,
        b_per: usize,
    },
    /// `alpha * [batch?, m, k] @ [batch?, n, k]^T`.
    MatMulNT {
        a: usize,
        b: usize,
        alpha: f64,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_per: usize,
        b_per: usize,
    },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `[rows, d] + [d]` broadcast over leading dims.
    AddRowVec { a: usize, v: usize, rows: usize, d: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Ln { a: usize },
    Rsqrt { a: usize },
    /// Row-wise softmax over the last axis.
    SoftmaxRows { a: usize, rows: usize, n: usize },
    /// Last-axis layer norm; saved = per-row [mean, rstd].
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        rows: usize,
        d: usize,
    },
    /// Axis-0 batch norm; saved = per-feature [mean, rstd]. `train`
    /// distinguishes the backward rule (batch stats vs constants).
    BatchNorm {
        x: usize,
        rows: usize,
        feat: usize,
        train: bool,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        b: usize,
        c: usize,
    },
    Transpose { a: usize, m: usize, n: usize },
    ConcatLast {
        parts: Vec<usize>,
        widths: Vec<usize>,
        rows: usize,
    },
    Reshape { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumLast { a: usize, rows: usize, n: usize },
    FrobeniusSq { a: usize },
    ScaleRows { a: usize, v: usize, m: usize, n: usize },
    ScaleCols { a: usize, v: usize, m: usize, n: usize },
    /// `[b, t, h*dk] -> [b*h, t, dk]`.
    SplitHeads { a: usize, b: usize, t: usize, h: usize, dk: usize },
    /// `[b*h, t, dk] -> [b, t, h*dk]`.
    MergeHeads { a: usize, b: usize, t: usize, h: usize, dk: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    /// Op-specific cache for the backward rule.
    saved: Vec<f64>,
}

/// Ordered record of executed operations and their tensors.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves and accessors ────────────────────────────────────────────

    pub fn tensor(
        &mut self,
        data: Vec<f64>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<TensorId, KernelError> {
        let n = numel_of(shape);
        if n != data.len() {
            return Err(KernelError::DataLength {
                expected: n,
                got: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf, Vec::new()))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId, KernelError> {
        self.tensor(data, shape, false)
    }

    pub fn leaf_host(&mut self, t: &HostTensor, requires_grad: bool) -> TensorId {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            requires_grad,
            Op::Leaf,
            Vec::new(),
        )
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(vec![], vec![v], false, Op::Leaf, Vec::new())
    }

    pub fn eye(&mut self, n: usize) -> TensorId {
        self.leaf_host(&HostTensor::eye(n), false)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Scalar read; panics if the tensor is not single-element.
    pub fn value(&self, id: TensorId) -> f64 {
        assert_eq!(self.nodes[id.0].data.len(), 1, "value() on non-scalar");
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Clear accumulated gradients on every tensor.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
        saved: Vec<f64>,
    ) -> TensorId {
        debug_assert_eq!(numel_of(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
            saved,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn req(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    // ── Matrix products ─────────────────────────────────────────────────

    fn mm_dims(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        nt: bool,
    ) -> Result<(usize, usize, usize, usize, usize, usize, Vec<usize>), KernelError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let mismatch = || KernelError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        // For NT the rhs holds [n, k]; for NN it holds [k, n].
        let (rk, n) = if nt {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != rk {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch_dims, a_per, b_per) = if ba == bb {
            (ba.to_vec(), m * k, rk * n)
        } else if ba.is_empty() {
            (bb.to_vec(), 0, rk * n)
        } else if bb.is_empty() {
            (ba.to_vec(), m * k, 0)
        } else {
            return Err(mismatch());
        };
        let batch = numel_of(&batch_dims);
        let mut out_shape = batch_dims;
        out_shape.push(m);
        out_shape.push(n);
        Ok((batch, m, k, n, a_per, b_per, out_shape))
    }

    /// Standard matrix product, batch-broadcast over leading dims.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, KernelError> {
        let (batch, m, k, n, a_per, b_per, out_shape) = self.mm_dims("matmul", a, b, false)?;
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        if b_per == 0 && batch > 1 {
            // Shared rhs: one tall product.
            gemm(Trans::No, Trans::No, batch * m, k, n, 1.0, ad, bd, 0.0, &mut out);
        } else {
            for i in 0..batch {
                gemm(
                    Trans::No,
                    Trans::No,
                    m,
                    k,
                    n,
                    1.0,
                    &ad[i * a_per..i * a_per + m * k],
                    &bd[i * b_per..i * b_per + k * n],
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.req(a.0) || self.req(b.0);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                a_per,
                b_per,
            },
            Vec::new(),
        ))
    }

    /// `alpha * a @ b^T` over the last two axes, batch-broadcast like
    /// [`Tape::matmul`].
    pub fn matmul_nt(
        &mut self,
        a: TensorId,
        b: TensorId,
        alpha: f64,
    ) -> Result<TensorId, KernelError> {
        let (batch, m, k, n, a_per, b_per, out_shape) = self.mm_dims("matmul_nt", a, b, true)?;
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..batch {
            gemm(
                Trans::No,
                Trans::Yes,
                m,
                k,
                n,
                alpha,
                &ad[i * a_per..i * a_per + m * k],
                &bd[i * b_per..i * b_per + n * k],
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.req(a.0) || self.req(b.0);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::MatMulNT {
                a: a.0,
                b: b.0,
                alpha,
                batch,
                m,
                k,
                n,
                a_per,
                b_per,
            },
            Vec::new(),
        ))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), KernelError> {
        if self.shape(a) != self.shape(b) {
            return Err(KernelError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, KernelError> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.req(a.0) || self.req(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, rg, Op::Add { a: a.0, b: b.0 }, Vec::new()))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, KernelError> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.req(a.0) || self.req(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, rg, Op::Sub { a: a.0, b: b.0 }, Vec::new()))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, KernelError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.req(a.0) || self.req(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, rg, Op::Mul { a: a.0, b: b.0 }, Vec::new()))
    }

    /// Broadcast add of a `[d]` vector onto the last axis of `a`.
    pub fn add_rowvec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId, KernelError> {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v);
        let d = *sa.last().unwrap_or(&0);
        if sv.len() != 1 || sv[0] != d || sa.is_empty() {
            return Err(KernelError::ShapeMismatch {
                op: "add_rowvec",
                lhs: sa.clone(),
                rhs: sv.to_vec(),
            });
        }
        let rows = numel_of(&sa) / d;
        let vd = &self.nodes[v.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..rows {
            for j in 0..d {
                data[r * d + j] += vd[j];
            }
        }
        let rg = self.req(a.0) || self.req(v.0);
        Ok(self.push(
            sa,
            data,
            rg,
            Op::AddRowVec {
                a: a.0,
                v: v.0,
                rows,
                d,
            },
            Vec::new(),
        ))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let rg = self.req(a.0);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Scale { a: a.0, c }, Vec::new())
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let rg = self.req(a.0);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::AddScalar { a: a.0 }, Vec::new())
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.req(a.0);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Relu { a: a.0 }, Vec::new())
    }

    /// Exact GELU `x * Phi(x)` via the error function.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| x * norm_cdf(x))
            .collect();
        let rg = self.req(a.0);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Gelu { a: a.0 }, Vec::new())
    }

    /// Elementwise natural log; caller guarantees positivity.
    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let rg = self.req(a.0);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Ln { a: a.0 }, Vec::new())
    }

    /// Elementwise `x^(-1/2)`; caller guarantees positivity.
    pub fn rsqrt(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| 1.0 / x.sqrt()).collect();
        let rg = self.req(a.0);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Rsqrt { a: a.0 }, Vec::new())
    }

    // ── Normalizations and losses ───────────────────────────────────────

    /// Softmax over the last axis, max-shifted for stability. Every output
    /// row sums to 1 within 1e-12 and entries lie in (0, 1).
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, KernelError> {
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape.last().ok_or(KernelError::BadShape {
            op: "softmax_rows",
            shape: shape.clone(),
            reason: "needs at least one axis",
        })?;
        if n == 0 {
            return Err(KernelError::BadShape {
                op: "softmax_rows",
                shape,
                reason: "empty last axis",
            });
        }
        let rows = numel_of(&shape) / n;
        let x = &self.nodes[a.0].data;
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * n..(r + 1) * n];
            let mut s = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o /= s;
            }
        }
        let rg = self.req(a.0);
        Ok(self.push(shape, data, rg, Op::SoftmaxRows { a: a.0, rows, n }, Vec::new()))
    }

    /// Last-axis layer norm with affine gain/bias; epsilon inside the root.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, KernelError> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(KernelError::DegenerateAxis {
                op: "layer_norm",
                len: d,
            });
        }
        for aff in [gain, bias] {
            if self.shape(aff) != [d] {
                return Err(KernelError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(aff).to_vec(),
                });
            }
        }
        let rows = numel_of(&shape) / d;
        let (xd, gd, bd) = (
            &self.nodes[x.0].data,
            &self.nodes[gain.0].data,
            &self.nodes[bias.0].data,
        );
        let mut data = vec![0.0; xd.len()];
        let mut saved = vec![0.0; 2 * rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            saved[r] = mu;
            saved[rows + r] = rstd;
            for j in 0..d {
                data[r * d + j] = (row[j] - mu) * rstd * gd[j] + bd[j];
            }
        }
        let rg = self.req(x.0) || self.req(gain.0) || self.req(bias.0);
        Ok(self.push(
            shape,
            data,
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                rows,
                d,
            },
            saved,
        ))
    }

    /// Batch norm over axis 0 with per-remaining-element statistics and no
    /// affine parameters. Train mode normalizes with the batch statistics
    /// (requiring at least two rows) and folds them into `stat` with momentum
    /// 0.9; eval mode normalizes with the running statistics unchanged.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        stat: &mut BnStat,
        mode: BnMode,
    ) -> Result<TensorId, KernelError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() {
            return Err(KernelError::BadShape {
                op: "batch_norm",
                shape,
                reason: "needs a batch axis",
            });
        }
        let rows = shape[0];
        let feat = numel_of(&shape[1..]);
        if stat.mean.len() != feat || stat.var.len() != feat {
            return Err(KernelError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape.clone(),
                rhs: vec![stat.mean.len()],
            });
        }
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; xd.len()];
        let mut saved = vec![0.0; 2 * feat];
        match mode {
            BnMode::Train => {
                if rows < 2 {
                    return Err(KernelError::InsufficientBatch {
                        op: "batch_norm",
                        batch: rows,
                    });
                }
                let mut mean = vec![0.0; feat];
                let mut var = vec![0.0; feat];
                for r in 0..rows {
                    for f in 0..feat {
                        mean[f] += xd[r * feat + f];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows as f64;
                }
                for r in 0..rows {
                    for f in 0..feat {
                        let d = xd[r * feat + f] - mean[f];
                        var[f] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= rows as f64;
                }
                for f in 0..feat {
                    let rstd = 1.0 / (var[f] + BATCH_NORM_EPS).sqrt();
                    saved[f] = mean[f];
                    saved[feat + f] = rstd;
                }
                for r in 0..rows {
                    for f in 0..feat {
                        data[r * feat + f] = (xd[r * feat + f] - saved[f]) * saved[feat + f];
                    }
                }
                stat.update(&mean, &var);
            }
            BnMode::Eval => {
                for f in 0..feat {
                    saved[f] = stat.mean[f];
                    saved[feat + f] = 1.0 / (stat.var[f] + BATCH_NORM_EPS).sqrt();
                }
                for r in 0..rows {
                    for f in 0..feat {
                        data[r * feat + f] = (xd[r * feat + f] - saved[f]) * saved[feat + f];
                    }
                }
            }
        }
        let rg = self.req(x.0);
        Ok(self.push(
            shape,
            data,
            rg,
            Op::BatchNorm {
                x: x.0,
                rows,
                feat,
                train: mode == BnMode::Train,
            },
            saved,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, max-shifted.
    pub fn cross_entropy_logits(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, KernelError> {
        let shape = self.shape(logits);
        if shape.len() != 2 {
            return Err(KernelError::BadShape {
                op: "cross_entropy_logits",
                shape: shape.to_vec(),
                reason: "expected [batch, classes]",
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(KernelError::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(KernelError::LabelOutOfRange {
                    index: i,
                    label: l,
                    classes: c,
                });
            }
        }
        let xd = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        total /= b as f64;
        let rg = self.req(logits.0);
        Ok(self.push(
            vec![],
            vec![total],
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                b,
                c,
            },
            Vec::new(),
        ))
    }

    // ── Shape ops and reductions ────────────────────────────────────────

    /// 2-D transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, KernelError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(KernelError::BadShape {
                op: "transpose",
                shape,
                reason: "expected a matrix",
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let xd = &self.nodes[a.0].data;
        let mut data = vec![0.0; xd.len()];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let rg = self.req(a.0);
        Ok(self.push(vec![n, m], data, rg, Op::Transpose { a: a.0, m, n }, Vec::new()))
    }

    /// Concatenate along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId, KernelError> {
        assert!(!parts.is_empty(), "concat_last: no parts");
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || sp[..sp.len() - 1] != lead[..] {
                return Err(KernelError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            widths.push(sp[sp.len() - 1]);
        }
        let rows = numel_of(&lead);
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (i, &p) in parts.iter().enumerate() {
            let w = widths[i];
            let pd = &self.nodes[p.0].data;
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|p| self.req(p.0));
        Ok(self.push(
            shape,
            data,
            rg,
            Op::ConcatLast {
                parts: parts.iter().map(|p| p.0).collect(),
                widths,
                rows,
            },
            Vec::new(),
        ))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId, KernelError> {
        if numel_of(shape) != self.numel(a) {
            return Err(KernelError::DataLength {
                expected: numel_of(shape),
                got: self.numel(a),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.req(a.0);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape { a: a.0 }, Vec::new()))
    }

    /// Collapse all axes after the first `keep` into one.
    pub fn flatten_from(&mut self, a: TensorId, keep: usize) -> Result<TensorId, KernelError> {
        let s = self.shape(a).to_vec();
        assert!(keep < s.len(), "flatten_from: keep out of range");
        let mut shape = s[..keep].to_vec();
        shape.push(s[keep..].iter().product());
        self.reshape(a, &shape)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.req(a.0);
        self.push(vec![], vec![s], rg, Op::SumAll { a: a.0 }, Vec::new())
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.numel(a).max(1);
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.req(a.0);
        self.push(vec![], vec![s], rg, Op::MeanAll { a: a.0 }, Vec::new())
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: TensorId) -> Result<TensorId, KernelError> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or(KernelError::BadShape {
            op: "sum_last",
            shape: shape.clone(),
            reason: "needs at least one axis",
        })?;
        let rows = numel_of(&shape) / n.max(1);
        let xd = &self.nodes[a.0].data;
        let data: Vec<f64> = (0..rows)
            .map(|r| xd[r * n..(r + 1) * n].iter().sum())
            .collect();
        let rg = self.req(a.0);
        Ok(self.push(
            shape[..shape.len() - 1].to_vec(),
            data,
            rg,
            Op::SumLast { a: a.0, rows, n },
            Vec::new(),
        ))
    }

    /// Squared Frobenius norm (sum of squared entries).
    pub fn frobenius_sq(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().map(|x| x * x).sum();
        let rg = self.req(a.0);
        self.push(vec![], vec![s], rg, Op::FrobeniusSq { a: a.0 }, Vec::new())
    }

    /// `out[i, j] = a[i, j] * v[i]` for a matrix and a length-m vector.
    pub fn scale_rows(&mut self, a: TensorId, v: TensorId) -> Result<TensorId, KernelError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || self.shape(v) != [shape[0]] {
            return Err(KernelError::ShapeMismatch {
                op: "scale_rows",
                lhs: shape,
                rhs: self.shape(v).to_vec(),
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let (ad, vd) = (&self.nodes[a.0].data, &self.nodes[v.0].data);
        let mut data = vec![0.0; ad.len()];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = ad[i * n + j] * vd[i];
            }
        }
        let rg = self.req(a.0) || self.req(v.0);
        Ok(self.push(
            shape,
            data,
            rg,
            Op::ScaleRows {
                a: a.0,
                v: v.0,
                m,
                n,
            },
            Vec::new(),
        ))
    }

    /// `out[i, j] = a[i, j] * v[j]` for a matrix and a length-n vector.
    pub fn scale_cols(&mut self, a: TensorId, v: TensorId) -> Result<TensorId, KernelError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || self.shape(v) != [shape[1]] {
            return Err(KernelError::ShapeMismatch {
                op: "scale_cols",
                lhs: shape,
                rhs: self.shape(v).to_vec(),
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let (ad, vd) = (&self.nodes[a.0].data, &self.nodes[v.0].data);
        let mut data = vec![0.0; ad.len()];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = ad[i * n + j] * vd[j];
            }
        }
        let rg = self.req(a.0) || self.req(v.0);
        Ok(self.push(
            shape,
            data,
            rg,
            Op::ScaleCols {
                a: a.0,
                v: v.0,
                m,
                n,
            },
            Vec::new(),
        ))
    }

    /// `[b, t, h*dk] -> [b*h, t, dk]`: expose attention heads as batch items.
    pub fn split_heads(&mut self, a: TensorId, heads: usize) -> Result<TensorId, KernelError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[2] % heads != 0 {
            return Err(KernelError::BadShape {
                op: "split_heads",
                shape,
                reason: "expected [batch, tokens, heads*dk]",
            });
        }
        let (b, t, hd) = (shape[0], shape[1], shape[2]);
        let dk = hd / heads;
        let xd = &self.nodes[a.0].data;
        let mut data = vec![0.0; xd.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * hd + h * dk;
                    let dst = ((bi * heads + h) * t + ti) * dk;
                    data[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let rg = self.req(a.0);
        Ok(self.push(
            vec![b * heads, t, dk],
            data,
            rg,
            Op::SplitHeads {
                a: a.0,
                b,
                t,
                h: heads,
                dk,
            },
            Vec::new(),
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: TensorId, heads: usize) -> Result<TensorId, KernelError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[0] % heads != 0 {
            return Err(KernelError::BadShape {
                op: "merge_heads",
                shape,
                reason: "expected [batch*heads, tokens, dk]",
            });
        }
        let (bh, t, dk) = (shape[0], shape[1], shape[2]);
        let b = bh / heads;
        let xd = &self.nodes[a.0].data;
        let mut data = vec![0.0; xd.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = ((bi * heads + h) * t + ti) * dk;
                    let dst = (bi * t + ti) * (heads * dk) + h * dk;
                    data[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let rg = self.req(a.0);
        Ok(self.push(
            vec![b, t, heads * dk],
            data,
            rg,
            Op::MergeHeads {
                a: a.0,
                b,
                t,
                h: heads,
                dk,
            },
            Vec::new(),
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Every tensor with `requires_grad`
    /// reachable from the root accumulates `d root / d tensor`; repeated
    /// calls keep accumulating until [`Tape::zero_grads`].
    pub fn backward(&mut self, root: TensorId) -> Result<(), KernelError> {
        if self.numel(root) != 1 {
            return Err(KernelError::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, gv) in acc.iter_mut().zip(&g) {
                        *a += gv;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(adj: &'a mut [Option<Vec<f64>>], idx: usize, n: usize) -> &'a mut [f64] {
            adj[idx].get_or_insert_with(|| vec![0.0; n])
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}

            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_per,
                b_per,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.req(*a) {
                    let bd = &self.nodes[*b].data;
                    let da = acc(adj, *a, self.nodes[*a].data.len());
                    for t in 0..*batch {
                        // dA = g @ B^T
                        gemm(
                            Trans::No,
                            Trans::Yes,
                            m,
                            n,
                            k,
                            1.0,
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[t * b_per..t * b_per + k * n],
                            1.0,
                            &mut da[t * a_per..t * a_per + m * k],
                        );
                    }
                }
                if self.req(*b) {
                    let ad = &self.nodes[*a].data;
                    let db = acc(adj, *b, self.nodes[*b].data.len());
                    if *b_per == 0 && *batch > 1 && *a_per != 0 {
                        // Shared rhs: dB = A_tall^T @ g_tall in one product.
                        gemm(Trans::Yes, Trans::No, k, batch * m, n, 1.0, ad, g, 1.0, db);
                    } else {
                        for t in 0..*batch {
                            // dB = A^T @ g
                            gemm(
                                Trans::Yes,
                                Trans::No,
                                k,
                                m,
                                n,
                                1.0,
                                &ad[t * a_per..t * a_per + m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                1.0,
                                &mut db[t * b_per..t * b_per + k * n],
                            );
                        }
                    }
                }
            }

            Op::MatMulNT {
                a,
                b,
                alpha,
                batch,
                m,
                k,
                n,
                a_per,
                b_per,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.req(*a) {
                    let bd = &self.nodes[*b].data;
                    let da = acc(adj, *a, self.nodes[*a].data.len());
                    for t in 0..*batch {
                        // dA = alpha * g @ B
                        gemm(
                            Trans::No,
                            Trans::No,
                            m,
                            n,
                            k,
                            *alpha,
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[t * b_per..t * b_per + n * k],
                            1.0,
                            &mut da[t * a_per..t * a_per + m * k],
                        );
                    }
                }
                if self.req(*b) {
                    let ad = &self.nodes[*a].data;
                    let db = acc(adj, *b, self.nodes[*b].data.len());
                    for t in 0..*batch {
                        // dB = alpha * g^T @ A
                        gemm(
                            Trans::Yes,
                            Trans::No,
                            n,
                            m,
                            k,
                            *alpha,
                            &g[t * m * n..(t + 1) * m * n],
                            &ad[t * a_per..t * a_per + m * k],
                            1.0,
                            &mut db[t * b_per..t * b_per + n * k],
                        );
                    }
                }
            }

            Op::Add { a, b } => {
                for idx in [*a, *b] {
                    if self.req(idx) {
                        let d = acc(adj, idx, g.len());
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }

            Op::Sub { a, b } => {
                if self.req(*a) {
                    let d = acc(adj, *a, g.len());
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if self.req(*b) {
                    let d = acc(adj, *b, g.len());
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                }
            }

            Op::Mul { a, b } => {
                if self.req(*a) {
                    let bd = &self.nodes[*b].data;
                    let d = acc(adj, *a, g.len());
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(bd) {
                        *dv += gv * bv;
                    }
                }
                if self.req(*b) {
                    let ad = &self.nodes[*a].data;
                    let d = acc(adj, *b, g.len());
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(ad) {
                        *dv += gv * av;
                    }
                }
            }

            Op::AddRowVec { a, v, rows, d } => {
                if self.req(*a) {
                    let da = acc(adj, *a, g.len());
                    for (dv, gv) in da.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if self.req(*v) {
                    let dv = acc(adj, *v, *d);
                    for r in 0..*rows {
                        for j in 0..*d {
                            dv[j] += g[r * d + j];
                        }
                    }
                }
            }

            Op::Scale { a, c } => {
                if self.req(*a) {
                    let d = acc(adj, *a, g.len());
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += c * gv;
                    }
                }
            }

            Op::AddScalar { a } => {
                if self.req(*a) {
                    let d = acc(adj, *a, g.len());
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }

            Op::Relu { a } => {
                if self.req(*a) {
                    let xd = &self.nodes[*a].data;
                    let d = acc(adj, *a, g.len());
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *dv += gv;
                        }
                    }
                }
            }

            Op::Gelu { a } => {
                if self.req(*a) {
                    let xd = &self.nodes[*a].data;
                    let d = acc(adj, *a, g.len());
                    for ((dv, gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *dv += gv * (norm_cdf(xv) + xv * norm_pdf(xv));
                    }
                }
            }

            Op::Ln { a } => {
                if self.req(*a) {
                    let xd = &self.nodes[*a].data;
                    let d = acc(adj, *a, g.len());
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xd) {
                        *dv += gv / xv;
                    }
                }
            }

            Op::Rsqrt { a } => {
                if self.req(*a) {
                    let yd = &node.data;
                    let d = acc(adj, *a, g.len());
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(yd) {
                        *dv += gv * (-0.5 * yv * yv * yv);
                    }
                }
            }

            Op::SoftmaxRows { a, rows, n } => {
                if self.req(*a) {
                    let y = &node.data;
                    let d = acc(adj, *a, g.len());
                    for r in 0..*rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        let dr = &mut d[r * n..(r + 1) * n];
                        for j in 0..*n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }

            Op::LayerNorm {
                x,
                gain,
                bias,
                rows,
                d,
            } => {
                let xd = &self.nodes[*x].data;
                let gd = &self.nodes[*gain].data;
                let (mu, rstd) = node.saved.split_at(*rows);
                if self.req(*gain) {
                    let dg = acc(adj, *gain, *d);
                    for r in 0..*rows {
                        for j in 0..*d {
                            let xh = (xd[r * d + j] - mu[r]) * rstd[r];
                            dg[j] += g[r * d + j] * xh;
                        }
                    }
                }
                if self.req(*bias) {
                    let db = acc(adj, *bias, *d);
                    for r in 0..*rows {
                        for j in 0..*d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if self.req(*x) {
                    let dx = acc(adj, *x, xd.len());
                    let dn = *d as f64;
                    for r in 0..*rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_xh = 0.0;
                        for j in 0..*d {
                            let xh = (xd[r * d + j] - mu[r]) * rstd[r];
                            let dh = g[r * d + j] * gd[j];
                            sum_dh += dh;
                            sum_dh_xh += dh * xh;
                        }
                        for j in 0..*d {
                            let xh = (xd[r * d + j] - mu[r]) * rstd[r];
                            let dh = g[r * d + j] * gd[j];
                            dx[r * d + j] +=
                                rstd[r] * (dh - sum_dh / dn - xh * sum_dh_xh / dn);
                        }
                    }
                }
            }

            Op::BatchNorm {
                x,
                rows,
                feat,
                train,
            } => {
                if self.req(*x) {
                    let xd = &self.nodes[*x].data;
                    let (mu, rstd) = node.saved.split_at(*feat);
                    let dx = acc(adj, *x, xd.len());
                    if *train {
                        let bn = *rows as f64;
                        for f in 0..*feat {
                            let mut sum_g = 0.0;
                            let mut sum_g_xh = 0.0;
                            for r in 0..*rows {
                                let xh = (xd[r * feat + f] - mu[f]) * rstd[f];
                                sum_g += g[r * feat + f];
                                sum_g_xh += g[r * feat + f] * xh;
                            }
                            for r in 0..*rows {
                                let xh = (xd[r * feat + f] - mu[f]) * rstd[f];
                                dx[r * feat + f] += rstd[f]
                                    * (g[r * feat + f] - sum_g / bn - xh * sum_g_xh / bn);
                            }
                        }
                    } else {
                        for r in 0..*rows {
                            for f in 0..*feat {
                                dx[r * feat + f] += g[r * feat + f] * rstd[f];
                            }
                        }
                    }
                }
            }

            Op::CrossEntropy { logits, labels, b, c } => {
                if self.req(*logits) {
                    let xd = &self.nodes[*logits].data;
                    let gs = g[0] / *b as f64;
                    let d = acc(adj, *logits, xd.len());
                    for (i, &l) in labels.iter().enumerate() {
                        let row = &xd[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for j in 0..*c {
                            let p = (row[j] - m).exp() / s;
                            let y = if j == l { 1.0 } else { 0.0 };
                            d[i * c + j] += gs * (p - y);
                        }
                    }
                }
            }

            Op::Transpose { a, m, n } => {
                if self.req(*a) {
                    let d = acc(adj, *a, m * n);
                    for i in 0..*m {
                        for j in 0..*n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }

            Op::ConcatLast {
                parts,
                widths,
                rows,
            } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    if self.req(*p) {
                        let d = acc(adj, *p, rows * w);
                        for r in 0..*rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }

            Op::Reshape { a } => {
                if self.req(*a) {
                    let d = acc(adj, *a, g.len());
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }

            Op::SumAll { a } => {
                if self.req(*a) {
                    let n = self.nodes[*a].data.len();
                    let d = acc(adj, *a, n);
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                }
            }

            Op::MeanAll { a } => {
                if self.req(*a) {
                    let n = self.nodes[*a].data.len();
                    let d = acc(adj, *a, n);
                    let gv = g[0] / n as f64;
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                }
            }

            Op::SumLast { a, rows, n } => {
                if self.req(*a) {
                    let d = acc(adj, *a, rows * n);
                    for r in 0..*rows {
                        for j in 0..*n {
                            d[r * n + j] += g[r];
                        }
                    }
                }
            }

            Op::FrobeniusSq { a } => {
                if self.req(*a) {
                    let xd = &self.nodes[*a].data;
                    let d = acc(adj, *a, xd.len());
                    for (dv, xv) in d.iter_mut().zip(xd) {
                        *dv += 2.0 * g[0] * xv;
                    }
                }
            }

            Op::ScaleRows { a, v, m, n } => {
                if self.req(*a) {
                    let vd = &self.nodes[*v].data;
                    let d = acc(adj, *a, m * n);
                    for i in 0..*m {
                        for j in 0..*n {
                            d[i * n + j] += g[i * n + j] * vd[i];
                        }
                    }
                }
                if self.req(*v) {
                    let ad = &self.nodes[*a].data;
                    let d = acc(adj, *v, *m);
                    for i in 0..*m {
                        let mut s = 0.0;
                        for j in 0..*n {
                            s += g[i * n + j] * ad[i * n + j];
                        }
                        d[i] += s;
                    }
                }
            }

            Op::ScaleCols { a, v, m, n } => {
                if self.req(*a) {
                    let vd = &self.nodes[*v].data;
                    let d = acc(adj, *a, m * n);
                    for i in 0..*m {
                        for j in 0..*n {
                            d[i * n + j] += g[i * n + j] * vd[j];
                        }
                    }
                }
                if self.req(*v) {
                    let ad = &self.nodes[*a].data;
                    let d = acc(adj, *v, *n);
                    for i in 0..*m {
                        for j in 0..*n {
                            d[j] += g[i * n + j] * ad[i * n + j];
                        }
                    }
                }
            }

            Op::SplitHeads { a, b, t, h, dk } => {
                if self.req(*a) {
                    let hd = h * dk;
                    let d = acc(adj, *a, b * t * hd);
                    for bi in 0..*b {
                        for ti in 0..*t {
                            for hi in 0..*h {
                                let dst = (bi * t + ti) * hd + hi * dk;
                                let src = ((bi * h + hi) * t + ti) * dk;
                                for c in 0..*dk {
                                    d[dst + c] += g[src + c];
                                }
                            }
                        }
                    }
                }
            }

            Op::MergeHeads { a, b, t, h, dk } => {
                if self.req(*a) {
                    let hd = h * dk;
                    let d = acc(adj, *a, b * h * t * dk);
                    for bi in 0..*b {
                        for ti in 0..*t {
                            for hi in 0..*h {
                                let src = (bi * t + ti) * hd + hi * dk;
                                let dst = ((bi * h + hi) * t + ti) * dk;
                                for c in 0..*dk {
                                    d[dst + c] += g[src + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
