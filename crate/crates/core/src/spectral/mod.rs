//! Numerical kernels shared by every analysis: SVD, principal-subspace
//! projectors, operator norms, softmax and its Jacobian, top-k selection.

mod power;
mod projector;
mod select;
mod softmax;
mod svd;

pub use power::{operator_norm, operator_norm_with, power_iteration, PowerEstimate, PowerOptions};
pub use projector::{projector, Projector};
pub use select::{rank_order, top_k_select, TieRule};
pub use softmax::{sigmoid, softmax, softmax_jacobian};
pub use svd::{svd, SpectralSummary, RANK_CUTOFF};
