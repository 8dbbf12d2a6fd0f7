//! Capture-level experimental protocols.
//!
//! Every study is a pure function of immutable bundles. Perturbations that
//! need a model (editing text and re-running it) happen upstream; [`perturb`]
//! holds hidden-state surrogates so each study also runs on synthetic data.

pub mod duplication;
pub mod masking;
pub mod ood;
pub mod overlap;
pub mod perturb;
pub mod rollout;
pub mod truncation;

pub use duplication::{amplification_surrogate, duplication_study, AmplificationPoint, DuplicationInput, DuplicationRow};
pub use masking::{expert_mask_study, mask_plan, MaskLayerResult, MaskPlan, MaskStudy};
pub use ood::{ood_confidence_study, OodLayerRow, OodSurrogate};
pub use overlap::{overlap_grid, pool_grids, OverlapCell, OverlapGrid, PooledCell, DEFAULT_GROUP_KEYS};
pub use perturb::{PerturbationKind, PerturbationSpec};
pub use rollout::{rollout_tracking, rollout_tracking_all, RolloutCurve, RolloutPoint, Window, DEFAULT_SLIDING_WIDTH};
pub use truncation::{subspace_truncation_agreement, TruncationPoint};
