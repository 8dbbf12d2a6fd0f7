//! Router confidence and router/data alignment on baseline vs perturbed inputs.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::balance::gaussian_matrix;
use crate::bound::{alignment_norm, DEFAULT_ENERGY_FRACTION};
use crate::capture::{CaptureBundle, F32Matrix, Gate, LayerRecord, RouterSpec, SequenceMeta};
use crate::capture::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::metrics::{router_confidence, ConfidenceConvention};
use crate::spectral::{projector, svd, TieRule};

use super::perturb::{PerturbationKind, PerturbationSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OodLayerRow {
    pub layer_index: u32,
    pub confidence_base: f64,
    pub confidence_ood: f64,
    /// `‖P Π_r‖` with `r` at 99% of the baseline energy.
    pub alignment_base: f64,
    /// Same, with `r` and `Π_r` taken from the perturbed hidden states.
    pub alignment_ood: f64,
    pub rank_base: usize,
    pub rank_ood: usize,
}

impl OodLayerRow {
    pub fn confidence_gap(&self) -> f64 {
        self.confidence_base - self.confidence_ood
    }
}

fn layer_alignment(layer: &LayerRecord) -> Result<(f64, usize)> {
    let summary = svd(&layer.hidden_f64())?;
    if summary.rank() == 0 {
        return Ok((0.0, 0));
    }
    let r = summary.rank_for_energy(DEFAULT_ENERGY_FRACTION);
    let proj = projector(&summary, r)?;
    Ok((alignment_norm(&layer.router.weights_f64(), &proj)?, r))
}

fn check_matched(a: &LayerRecord, b: &LayerRecord) -> Result<()> {
    if a.layer_index != b.layer_index {
        return Err(Error::LayerMismatch(format!(
            "layer {} paired with layer {}",
            a.layer_index, b.layer_index
        )));
    }
    let (ea, eb) = (a.router.num_experts(), b.router.num_experts());
    let (da, db) = (a.router.hidden_dim(), b.router.hidden_dim());
    if ea != eb || da != db {
        return Err(Error::LayerMismatch(format!(
            "layer {}: router {ea}x{da} vs {eb}x{db}",
            a.layer_index
        )));
    }
    Ok(())
}

/// Per-layer confidence and alignment for two bundles with the same layers.
pub fn ood_confidence_study(
    baseline: &CaptureBundle,
    perturbed: &CaptureBundle,
    convention: ConfidenceConvention,
) -> Result<Vec<OodLayerRow>> {
    if baseline.layers.len() != perturbed.layers.len() {
        return Err(Error::LayerMismatch(format!(
            "{} baseline layers vs {} perturbed layers",
            baseline.layers.len(),
            perturbed.layers.len()
        )));
    }
    baseline
        .layers
        .iter()
        .zip(&perturbed.layers)
        .map(|(a, b)| {
            check_matched(a, b)?;
            let (alignment_base, rank_base) = layer_alignment(a)?;
            let (alignment_ood, rank_ood) = layer_alignment(b)?;
            Ok(OodLayerRow {
                layer_index: a.layer_index,
                confidence_base: router_confidence(&a.computed_logits(), convention)?,
                confidence_ood: router_confidence(&b.computed_logits(), convention)?,
                alignment_base,
                alignment_ood,
                rank_base,
                rank_ood,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodSurrogate {
    pub tokens: usize,
    pub hidden_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Scale of the row-space coefficients of each hidden state.
    pub scale: f64,
    pub seed: u64,
}

impl Default for OodSurrogate {
    fn default() -> Self {
        Self {
            tokens: 64,
            hidden_dim: 32,
            experts: 8,
            top_k: 2,
            scale: 1.0,
            seed: 0,
        }
    }
}

impl OodSurrogate {
    /// A one-layer bundle whose hidden states lie in the router row space and
    /// its copy rotated a quarter turn out of it.
    pub fn bundles(&self) -> Result<(CaptureBundle, CaptureBundle)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let router = gaussian_matrix(&mut rng, self.experts, self.hidden_dim, 1.0 / libm::sqrt(self.hidden_dim as f64));
        let coeffs = gaussian_matrix(&mut rng, self.tokens, self.experts, self.scale);
        // H = C P spans exactly the row space
        let h = coeffs.matmul(&router)?;
        let layer = LayerRecord {
            layer_index: 0,
            hidden_states: F32Matrix::from_f64(&h),
            router: RouterSpec {
                weights: F32Matrix::from_f64(&router),
                top_k: self.top_k,
                gate: Gate::Softmax,
                tie_rule: TieRule::LowestIndex,
            },
            usage: None,
            logits: None,
        };
        let base = CaptureBundle {
            format_version: FORMAT_VERSION,
            model_id: "ood-surrogate".into(),
            logits_tolerance: crate::capture::DEFAULT_LOGITS_TOLERANCE,
            shared_experts: 0,
            layers: alloc::vec![layer],
            sequences: alloc::vec![SequenceMeta {
                sequence_id: "s0".into(),
                start: 0,
                end: self.tokens,
                prompt_boundary: None,
                labels: Default::default(),
            }],
        };
        let rotated = PerturbationSpec::new(PerturbationKind::SubspaceRotation(1.0), self.seed).apply(&base)?;
        Ok((base, rotated))
    }
}
