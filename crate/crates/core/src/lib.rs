//! Routing-geometry analysis for mixture-of-experts models.
//!
//! The crate is `no_std` and only needs `alloc`. It covers:
//!
//! - [`linalg`] and [`spectral`]: dense kernels (SVD, projectors, operator
//!   norms, softmax and its Jacobian, top-k selection).
//! - [`capture`]: the in-memory activation-capture data model and its
//!   invariants. The on-disk MOEC encoding lives in the `moelens` crate.
//! - [`bound`]: data-aware logit-distance bounds through a principal
//!   subspace projector, and the pairwise scatter pipeline.
//! - [`metrics`]: token- and sequence-level routing metrics.
//! - [`balance`]: a correlated hidden-state generator and a gradient trainer
//!   for the simplified load-balancing loss.
//! - [`protocol`]: capture-level studies (OOD confidence, duplication,
//!   expert masking, subspace truncation, rollout tracking, overlap grids).
//! - [`synth`]: seeded synthetic captures.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod balance;
pub mod bound;
pub mod capture;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod pairs;
pub mod protocol;
pub mod spectral;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use linalg::Matrix;
