//! Model dimensions, learnable parameters for both streams, and the combined
//! forward pass.
//!
//! Parameters live on the host ([`HostTensor`]); each training step binds them
//! onto a fresh [`Tape`] as gradient-requiring leaves, runs the forward pass,
//! and reads gradients back after one reverse sweep.

pub mod encoder;
pub mod global;
pub mod local;

use crate::autodiff::{BnStat, HostTensor, KernelError, Tape, TensorId};
use crate::geometry::RegionPartition;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Electrode count N.
    pub channels: usize,
    /// Per-electrode feature width d (frequency bands).
    pub feature_dim: usize,
    /// Emotion classes C.
    pub classes: usize,
    /// Region count K.
    pub regions: usize,
    /// Global-stream GCN hidden widths (depth = len).
    pub gcn_hidden: Vec<usize>,
    /// Token width after concatenating all region branches.
    pub d_model: usize,
    /// Attention heads (encoder and graph proposal).
    pub heads: usize,
    /// Encoder layer count.
    pub depth: usize,
    /// Encoder feed-forward inner width.
    pub d_ff: usize,
    /// Local head hidden width.
    pub d_hidden: usize,
    /// Key/query width of the graph-proposal heads.
    pub attn_head_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            channels: 62,
            feature_dim: 5,
            classes: 3,
            regions: 5,
            gcn_hidden: vec![32, 64],
            d_model: 120,
            heads: 15,
            depth: 5,
            d_ff: 512,
            d_hidden: 16,
            attn_head_dim: 8,
        }
    }
}

impl ModelDims {
    /// The small configuration used by the gradient-check suite.
    pub fn tiny() -> Self {
        ModelDims {
            channels: 8,
            feature_dim: 3,
            classes: 3,
            regions: 2,
            gcn_hidden: vec![4, 4],
            d_model: 8,
            heads: 2,
            depth: 1,
            d_ff: 16,
            d_hidden: 4,
            attn_head_dim: 4,
        }
    }

    /// Width of one region branch, `d_model / K`.
    pub fn region_width(&self) -> usize {
        self.d_model / self.regions
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("channels", self.channels),
            ("feature_dim", self.feature_dim),
            ("classes", self.classes),
            ("regions", self.regions),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("d_hidden", self.d_hidden),
            ("attn_head_dim", self.attn_head_dim),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.channels < 2 {
            return Err("channels must be at least 2".into());
        }
        if self.gcn_hidden.is_empty() || self.gcn_hidden.contains(&0) {
            return Err("gcn_hidden must be a non-empty list of positive widths".into());
        }
        if self.d_model % self.heads != 0 {
            return Err(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            ));
        }
        if self.d_model % self.regions != 0 {
            return Err(format!(
                "regions ({}) must divide d_model ({}) so K*d' = d_model exactly",
                self.regions, self.d_model
            ));
        }
        Ok(())
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub p: HostTensor,
    pub q: HostTensor,
    pub b: HostTensor,
    pub gcn: Vec<HostTensor>,
    pub fc_w: HostTensor,
    pub fc_b: HostTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionParams {
    pub p: HostTensor,
    pub q: HostTensor,
    pub b: HostTensor,
    /// Per-head query/key projections, N x d_k.
    pub wq: Vec<HostTensor>,
    pub wk: Vec<HostTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub wq: HostTensor,
    pub wk: HostTensor,
    pub wv: HostTensor,
    pub wo: HostTensor,
    pub ffn1: HostTensor,
    pub ffn2: HostTensor,
    pub ln1_g: HostTensor,
    pub ln1_b: HostTensor,
    pub ln2_g: HostTensor,
    pub ln2_b: HostTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalParams {
    pub regions: Vec<RegionParams>,
    /// Per-region GCN projection, d x d'.
    pub w_gcn: Vec<HostTensor>,
    pub encoder: Vec<EncoderLayerParams>,
    pub head_w1: HostTensor,
    pub head_b1: HostTensor,
    pub head_w2: HostTensor,
    pub head_b2: HostTensor,
}

/// All learnable matrices of both streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub global: GlobalParams,
    pub local: LocalParams,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> HostTensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    HostTensor {
        data,
        shape: vec![rows, cols],
    }
}

/// Identity plus small Gaussian noise: training starts from the prior itself.
fn near_identity(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> HostTensor {
    let mut t = HostTensor::eye(n);
    for v in t.data.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    t
}

impl ModelParams {
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        dims.validate().expect("valid dims");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.channels;
        let global = GlobalParams {
            p: near_identity(&mut rng, n, 0.01),
            q: near_identity(&mut rng, n, 0.01),
            b: HostTensor::zeros(&[n, n]),
            gcn: {
                let mut ws = Vec::new();
                let mut prev = dims.feature_dim;
                for &h in &dims.gcn_hidden {
                    ws.push(glorot(&mut rng, prev, h));
                    prev = h;
                }
                ws
            },
            fc_w: glorot(&mut rng, n * dims.gcn_hidden.last().unwrap(), dims.classes),
            fc_b: HostTensor::zeros(&[dims.classes]),
        };
        let regions = (0..dims.regions)
            .map(|_| RegionParams {
                p: near_identity(&mut rng, n, 0.01),
                q: near_identity(&mut rng, n, 0.01),
                b: HostTensor::zeros(&[n, n]),
                wq: (0..dims.heads)
                    .map(|_| glorot(&mut rng, n, dims.attn_head_dim))
                    .collect(),
                wk: (0..dims.heads)
                    .map(|_| glorot(&mut rng, n, dims.attn_head_dim))
                    .collect(),
            })
            .collect();
        let local = LocalParams {
            regions,
            w_gcn: (0..dims.regions)
                .map(|_| glorot(&mut rng, dims.feature_dim, dims.region_width()))
                .collect(),
            encoder: (0..dims.depth)
                .map(|_| EncoderLayerParams {
                    wq: glorot(&mut rng, dims.d_model, dims.d_model),
                    wk: glorot(&mut rng, dims.d_model, dims.d_model),
                    wv: glorot(&mut rng, dims.d_model, dims.d_model),
                    wo: glorot(&mut rng, dims.d_model, dims.d_model),
                    ffn1: glorot(&mut rng, dims.d_model, dims.d_ff),
                    ffn2: glorot(&mut rng, dims.d_ff, dims.d_model),
                    ln1_g: HostTensor {
                        data: vec![1.0; dims.d_model],
                        shape: vec![dims.d_model],
                    },
                    ln1_b: HostTensor::zeros(&[dims.d_model]),
                    ln2_g: HostTensor {
                        data: vec![1.0; dims.d_model],
                        shape: vec![dims.d_model],
                    },
                    ln2_b: HostTensor::zeros(&[dims.d_model]),
                })
                .collect(),
            head_w1: glorot(&mut rng, dims.d_model, dims.d_hidden),
            head_b1: HostTensor::zeros(&[dims.d_hidden]),
            head_w2: glorot(&mut rng, n * dims.d_hidden, dims.classes),
            head_b2: HostTensor::zeros(&[dims.classes]),
        };
        ModelParams {
            dims: dims.clone(),
            global,
            local,
        }
    }

    /// Visit every parameter in the canonical order (shared by binding,
    /// optimizer state and checkpoints).
    pub fn for_each(&self, mut f: impl FnMut(&str, &HostTensor)) {
        f("global.p", &self.global.p);
        f("global.q", &self.global.q);
        f("global.b", &self.global.b);
        for (l, w) in self.global.gcn.iter().enumerate() {
            f(&format!("global.gcn.{l}"), w);
        }
        f("global.fc_w", &self.global.fc_w);
        f("global.fc_b", &self.global.fc_b);
        for (k, r) in self.local.regions.iter().enumerate() {
            f(&format!("local.region.{k}.p"), &r.p);
            f(&format!("local.region.{k}.q"), &r.q);
            f(&format!("local.region.{k}.b"), &r.b);
            for (h, w) in r.wq.iter().enumerate() {
                f(&format!("local.region.{k}.attn.{h}.wq"), w);
            }
            for (h, w) in r.wk.iter().enumerate() {
                f(&format!("local.region.{k}.attn.{h}.wk"), w);
            }
        }
        for (k, w) in self.local.w_gcn.iter().enumerate() {
            f(&format!("local.gcn.{k}"), w);
        }
        for (l, e) in self.local.encoder.iter().enumerate() {
            f(&format!("local.enc.{l}.wq"), &e.wq);
            f(&format!("local.enc.{l}.wk"), &e.wk);
            f(&format!("local.enc.{l}.wv"), &e.wv);
            f(&format!("local.enc.{l}.wo"), &e.wo);
            f(&format!("local.enc.{l}.ffn1"), &e.ffn1);
            f(&format!("local.enc.{l}.ffn2"), &e.ffn2);
            f(&format!("local.enc.{l}.ln1_g"), &e.ln1_g);
            f(&format!("local.enc.{l}.ln1_b"), &e.ln1_b);
            f(&format!("local.enc.{l}.ln2_g"), &e.ln2_g);
            f(&format!("local.enc.{l}.ln2_b"), &e.ln2_b);
        }
        f("local.head.w1", &self.local.head_w1);
        f("local.head.b1", &self.local.head_b1);
        f("local.head.w2", &self.local.head_w2);
        f("local.head.b2", &self.local.head_b2);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut HostTensor)) {
        f("global.p", &mut self.global.p);
        f("global.q", &mut self.global.q);
        f("global.b", &mut self.global.b);
        for (l, w) in self.global.gcn.iter_mut().enumerate() {
            f(&format!("global.gcn.{l}"), w);
        }
        f("global.fc_w", &mut self.global.fc_w);
        f("global.fc_b", &mut self.global.fc_b);
        for (k, r) in self.local.regions.iter_mut().enumerate() {
            f(&format!("local.region.{k}.p"), &mut r.p);
            f(&format!("local.region.{k}.q"), &mut r.q);
            f(&format!("local.region.{k}.b"), &mut r.b);
            for (h, w) in r.wq.iter_mut().enumerate() {
                f(&format!("local.region.{k}.attn.{h}.wq"), w);
            }
            for (h, w) in r.wk.iter_mut().enumerate() {
                f(&format!("local.region.{k}.attn.{h}.wk"), w);
            }
        }
        for (k, w) in self.local.w_gcn.iter_mut().enumerate() {
            f(&format!("local.gcn.{k}"), w);
        }
        for (l, e) in self.local.encoder.iter_mut().enumerate() {
            f(&format!("local.enc.{l}.wq"), &mut e.wq);
            f(&format!("local.enc.{l}.wk"), &mut e.wk);
            f(&format!("local.enc.{l}.wv"), &mut e.wv);
            f(&format!("local.enc.{l}.wo"), &mut e.wo);
            f(&format!("local.enc.{l}.ffn1"), &mut e.ffn1);
            f(&format!("local.enc.{l}.ffn2"), &mut e.ffn2);
            f(&format!("local.enc.{l}.ln1_g"), &mut e.ln1_g);
            f(&format!("local.enc.{l}.ln1_b"), &mut e.ln1_b);
            f(&format!("local.enc.{l}.ln2_g"), &mut e.ln2_g);
            f(&format!("local.enc.{l}.ln2_b"), &mut e.ln2_b);
        }
        f("local.head.w1", &mut self.local.head_w1);
        f("local.head.b1", &mut self.local.head_b1);
        f("local.head.w2", &mut self.local.head_w2);
        f("local.head.b2", &mut self.local.head_b2);
    }

    /// Canonical (name, shape) listing.
    pub fn entries(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        self.for_each(|n, t| v.push((n.to_string(), t.shape.clone())));
        v
    }
}

// ── Batch-norm state ────────────────────────────────────────────────────

/// Running statistics for every (region, head) graph-proposal batch norm.
/// Each stat holds one mean/variance per column of the N x N attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub stats: Vec<Vec<BnStat>>,
}

impl BnState {
    pub fn identity(dims: &ModelDims) -> Self {
        BnState {
            stats: (0..dims.regions)
                .map(|_| (0..dims.heads).map(|_| BnStat::identity(dims.channels)).collect())
                .collect(),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &[f64])) {
        for (k, region) in self.stats.iter().enumerate() {
            for (h, s) in region.iter().enumerate() {
                f(&format!("bn.region.{k}.head.{h}.mean"), &s.mean);
                f(&format!("bn.region.{k}.head.{h}.var"), &s.var);
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<f64>)) {
        for (k, region) in self.stats.iter_mut().enumerate() {
            for (h, s) in region.iter_mut().enumerate() {
                f(&format!("bn.region.{k}.head.{h}.mean"), &mut s.mean);
                f(&format!("bn.region.{k}.head.{h}.var"), &mut s.var);
            }
        }
    }
}

// ── Tape binding ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BoundGlobal {
    pub p: TensorId,
    pub q: TensorId,
    pub b: TensorId,
    pub gcn: Vec<TensorId>,
    pub fc_w: TensorId,
    pub fc_b: TensorId,
}

#[derive(Debug, Clone)]
pub struct BoundRegion {
    pub p: TensorId,
    pub q: TensorId,
    pub b: TensorId,
    pub wq: Vec<TensorId>,
    pub wk: Vec<TensorId>,
}

#[derive(Debug, Clone)]
pub struct BoundEncoderLayer {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ffn1: TensorId,
    pub ffn2: TensorId,
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
}

#[derive(Debug, Clone)]
pub struct BoundLocal {
    pub regions: Vec<BoundRegion>,
    pub w_gcn: Vec<TensorId>,
    pub encoder: Vec<BoundEncoderLayer>,
    pub head_w1: TensorId,
    pub head_b1: TensorId,
    pub head_w2: TensorId,
    pub head_b2: TensorId,
}

/// Parameters bound onto a tape; `names` pairs every bound leaf with its
/// canonical name, in canonical order, for gradient collection.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub global: Option<BoundGlobal>,
    pub local: Option<BoundLocal>,
    pub names: Vec<(String, TensorId)>,
}

/// Which streams participate in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamSelect {
    pub disable_global: bool,
    pub disable_local: bool,
}

pub fn bind(
    tape: &mut Tape,
    params: &ModelParams,
    select: StreamSelect,
    trainable: bool,
) -> BoundModel {
    let mut names = Vec::new();
    let mut leaf = |tape: &mut Tape, name: String, t: &HostTensor| -> TensorId {
        let id = tape.leaf_host(t, trainable);
        names.push((name, id));
        id
    };
    let global = (!select.disable_global).then(|| BoundGlobal {
        p: leaf(tape, "global.p".into(), &params.global.p),
        q: leaf(tape, "global.q".into(), &params.global.q),
        b: leaf(tape, "global.b".into(), &params.global.b),
        gcn: params
            .global
            .gcn
            .iter()
            .enumerate()
            .map(|(l, w)| leaf(tape, format!("global.gcn.{l}"), w))
            .collect(),
        fc_w: leaf(tape, "global.fc_w".into(), &params.global.fc_w),
        fc_b: leaf(tape, "global.fc_b".into(), &params.global.fc_b),
    });
    let local = (!select.disable_local).then(|| BoundLocal {
        regions: params
            .local
            .regions
            .iter()
            .enumerate()
            .map(|(k, r)| BoundRegion {
                p: leaf(tape, format!("local.region.{k}.p"), &r.p),
                q: leaf(tape, format!("local.region.{k}.q"), &r.q),
                b: leaf(tape, format!("local.region.{k}.b"), &r.b),
                wq: r
                    .wq
                    .iter()
                    .enumerate()
                    .map(|(h, w)| leaf(tape, format!("local.region.{k}.attn.{h}.wq"), w))
                    .collect(),
                wk: r
                    .wk
                    .iter()
                    .enumerate()
                    .map(|(h, w)| leaf(tape, format!("local.region.{k}.attn.{h}.wk"), w))
                    .collect(),
            })
            .collect(),
        w_gcn: params
            .local
            .w_gcn
            .iter()
            .enumerate()
            .map(|(k, w)| leaf(tape, format!("local.gcn.{k}"), w))
            .collect(),
        encoder: params
            .local
            .encoder
            .iter()
            .enumerate()
            .map(|(l, e)| BoundEncoderLayer {
                wq: leaf(tape, format!("local.enc.{l}.wq"), &e.wq),
                wk: leaf(tape, format!("local.enc.{l}.wk"), &e.wk),
                wv: leaf(tape, format!("local.enc.{l}.wv"), &e.wv),
                wo: leaf(tape, format!("local.enc.{l}.wo"), &e.wo),
                ffn1: leaf(tape, format!("local.enc.{l}.ffn1"), &e.ffn1),
                ffn2: leaf(tape, format!("local.enc.{l}.ffn2"), &e.ffn2),
                ln1_g: leaf(tape, format!("local.enc.{l}.ln1_g"), &e.ln1_g),
                ln1_b: leaf(tape, format!("local.enc.{l}.ln1_b"), &e.ln1_b),
                ln2_g: leaf(tape, format!("local.enc.{l}.ln2_g"), &e.ln2_g),
                ln2_b: leaf(tape, format!("local.enc.{l}.ln2_b"), &e.ln2_b),
            })
            .collect(),
        head_w1: leaf(tape, "local.head.w1".into(), &params.local.head_w1),
        head_b1: leaf(tape, "local.head.b1".into(), &params.local.head_b1),
        head_w2: leaf(tape, "local.head.w2".into(), &params.local.head_w2),
        head_b2: leaf(tape, "local.head.b2".into(), &params.local.head_b2),
    });
    BoundModel {
        global,
        local,
        names,
    }
}

// ── Feature batches and the combined forward ────────────────────────────

/// A batch of per-electrode, per-band feature vectors with labels.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    /// Row-major `[batch, channels, feature_dim]`.
    pub features: Vec<f64>,
    pub batch: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.channels, self.feature_dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardSettings {
    /// Zero rows/columns outside each region before normalization.
    pub mask_local_graphs: bool,
}

/// Everything a training step needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub y_global: Option<TensorId>,
    pub y_local: Option<TensorId>,
    pub a_g: Option<TensorId>,
    pub local_graphs: Vec<TensorId>,
}

/// 0/1 masks restricting each region's graph to its own electrodes.
pub fn region_masks(partition: &RegionPartition, n: usize) -> Vec<HostTensor> {
    (0..partition.num_regions())
        .map(|k| {
            let members = partition.members(k);
            let mut m = HostTensor::zeros(&[n, n]);
            for &i in &members {
                for &j in &members {
                    m.data[i * n + j] = 1.0;
                }
            }
            m
        })
        .collect()
}

/// Run whichever streams are bound. `prior` is the spatial prior adjacency;
/// `x` holds the already-inserted feature leaf.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    bound: &BoundModel,
    dims: &ModelDims,
    prior: TensorId,
    x: TensorId,
    bn: &mut BnState,
    mode: Mode,
    settings: &ForwardSettings,
    masks: Option<&[HostTensor]>,
) -> Result<ForwardOut, KernelError> {
    let mut out = ForwardOut {
        y_global: None,
        y_local: None,
        a_g: None,
        local_graphs: Vec::new(),
    };
    if let Some(g) = &bound.global {
        let (logits, a_g) = global::global_forward(tape, g, prior, x)?;
        out.y_global = Some(logits);
        out.a_g = Some(a_g);
    }
    if let Some(l) = &bound.local {
        let masks = settings.mask_local_graphs.then(|| {
            masks.expect("mask_local_graphs requires region masks")
        });
        let (logits, graphs) =
            local::local_forward(tape, l, dims, prior, x, bn, mode, masks)?;
        out.y_local = Some(logits);
        out.local_graphs = graphs;
    }
    Ok(out)
}

/// Shared by both streams: `relu((P * A_prior + b) * Q)`.
pub(crate) fn learned_graph(
    tape: &mut Tape,
    p: TensorId,
    q: TensorId,
    b: TensorId,
    prior: TensorId,
) -> Result<TensorId, KernelError> {
    let pa = tape.matmul(p, prior)?;
    let pab = tape.add(pa, b)?;
    let pabq = tape.matmul(pab, q)?;
    Ok(tape.relu(pabq))
}
