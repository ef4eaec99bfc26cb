//! Dual-stream graph-transformer for multichannel EEG emotion classification.
//!
//! The library couples a spatial Euclidean prior over electrode positions with
//! two learnable pathways: a global dynamic-graph GCN stream and a hierarchical
//! local-region stream (per-region attention-proposed graphs, parallel GCNs and
//! a dimension-as-token transformer encoder). Both streams are trained jointly
//! under a four-term objective (two cross-entropies, a KL geometric constraint
//! anchoring learned graphs to the prior, and a pairwise diversity penalty).
//!
//! Every forward operation runs on the [`autodiff`] tape, so gradients for the
//! whole model come from a single reverse sweep and can be validated against
//! central finite differences (see [`gradcheck`] and the `gradcheck` CLI
//! subcommand).
//!
//! The `neuro-hgln` binary exposes `gen-data`, `train`, `eval`, `export-graph`
//! and `gradcheck` subcommands; the mdbook under `book/` walks through the
//! concepts chapter by chapter.

// Unsafe is confined to the single dgemm FFI-style call in autodiff::gemm.
#![deny(unsafe_code)]

pub mod autodiff;
// Remaining modules land incrementally during the build-out.
// pub mod cli;
pub mod data;
pub mod geometry;
// pub mod gradcheck;
pub mod model;
pub mod objective;
// pub mod train;

pub use autodiff::{HostTensor, KernelError, Tape, TensorId};
