//! Allocation-only core of the DiagNet detection neck.
//!
//! The crate is `no_std` and needs only `alloc`. It covers the whole numeric
//! pipeline: a patch graph built from a feature map, diagonal adjacency
//! targets derived from ground-truth boxes, a single-layer GCN neck with
//! hand-derived gradients, a grid detection head, mAP evaluation and the
//! alternating training loop. File formats, checkpoint IO and the CLI live in
//! the `diagnet` crate.
//!
//! ```text
//! image ─► featurize ─► FeatureMap ─► to_graph ─► Graph(X, A, Ã)
//!                                                  │
//!            boxes ─► build_*_targets ─► DiagTargets
//!                                                  ▼
//!                          forward: H = tanh(Ã X W_emb), Â = H Hᵀ,
//!                                   Ŷ = tanh(Xᵀ Â W_pred)
//!                                                  │
//!                      pool_diag_map ─► head_forward ─► decode ─► nms
//! ```

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diagnet;
pub mod error;
pub mod evalmap;
pub mod geom;
pub mod graph;
pub mod head;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use rng::SplitMix64;
