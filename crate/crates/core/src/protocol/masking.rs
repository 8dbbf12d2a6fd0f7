//! Keep-the-most-used-experts masking, scored without an LM head.
//!
//! A reference sequence picks the `m` most frequently used experts per layer.
//! Evaluated tokens are then re-routed inside that kept set. Two scores
//! replace a perplexity evaluation: the fraction of the original gate mass
//! that already sat on kept experts, and how often the masked top-1 expert
//! equals the unmasked one.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::capture::{CaptureBundle, LayerRecord};
use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, Matrix};
use crate::metrics::sequence_profile;
use crate::spectral::{rank_order, TieRule};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskPlan {
    /// Kept experts per layer, ascending.
    pub kept_experts: BTreeMap<u32, Vec<usize>>,
    pub source_sequence: String,
    pub m: usize,
    /// Inclusive layer-index range that is masked.
    pub layer_range: (u32, u32),
}

/// Top-`m` experts of `sequence_id` by usage frequency (ties to the lower
/// index) for every layer of `reference` inside `layer_range`.
pub fn mask_plan(reference: &CaptureBundle, sequence_id: &str, m: usize, layer_range: (u32, u32)) -> Result<MaskPlan> {
    let seq = reference.sequence(sequence_id)?;
    let mut kept_experts = BTreeMap::new();
    for layer in reference
        .layers
        .iter()
        .filter(|l| (layer_range.0..=layer_range.1).contains(&l.layer_index))
    {
        let e = layer.router.num_experts();
        if m < layer.router.top_k || m > e {
            return Err(Error::OutOfRange {
                what: "kept experts m",
                value: m,
                min: layer.router.top_k,
                max: e,
            });
        }
        let profile = sequence_profile(&layer.usage_or_derive(), seq, layer.layer_index)?;
        let mut kept: Vec<usize> = rank_order(&profile.p, TieRule::LowestIndex).into_iter().take(m).collect();
        kept.sort_unstable();
        kept_experts.insert(layer.layer_index, kept);
    }
    if kept_experts.is_empty() {
        return Err(Error::Empty { what: "masked layers" });
    }
    Ok(MaskPlan {
        kept_experts,
        source_sequence: sequence_id.into(),
        m,
        layer_range,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskLayerResult {
    pub layer_index: u32,
    /// Mean over tokens of the gate mass already on kept experts.
    pub coverage: f64,
    /// Fraction of tokens whose masked top-1 equals the unmasked top-1.
    pub agreement: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskStudy {
    pub plan: MaskPlan,
    pub layers: Vec<MaskLayerResult>,
    /// Means over all masked (layer, token) cells.
    pub coverage: f64,
    pub agreement: f64,
}

fn routing_logits(layer: &LayerRecord) -> Matrix {
    match &layer.logits {
        Some(g) => g.to_f64(),
        None => layer.computed_logits(),
    }
}

/// Masked top-k selection for one token: the `k` best kept experts.
pub fn masked_selection(logits: &[f64], kept: &[usize], k: usize) -> Vec<usize> {
    let sub: Vec<f64> = kept.iter().map(|&e| logits[e]).collect();
    rank_order(&sub, TieRule::LowestIndex)
        .into_iter()
        .take(k)
        .map(|i| kept[i])
        .collect()
}

/// Scores `plan` on every token of `eval_bundle`.
pub fn expert_mask_study(plan: &MaskPlan, eval_bundle: &CaptureBundle) -> Result<MaskStudy> {
    let mut layers = Vec::with_capacity(plan.kept_experts.len());
    let mut all_cov = Vec::new();
    let mut all_agree = Vec::new();
    for (&idx, kept) in &plan.kept_experts {
        let layer = eval_bundle
            .layer(idx)
            .ok_or_else(|| Error::LayerMismatch(alloc::format!("layer {idx} missing from evaluated bundle")))?;
        let (e, k) = (layer.router.num_experts(), layer.router.top_k);
        if kept.len() < k || kept.iter().any(|&x| x >= e) {
            return Err(Error::InvalidParameter {
                what: "mask plan",
                reason: alloc::format!("layer {idx}: kept set {kept:?} cannot route top-{k} of {e}"),
            });
        }
        let usage = layer.usage_or_derive();
        let logits = routing_logits(layer);
        let t = layer.tokens();
        let mut cov = Vec::with_capacity(t);
        let mut agree = Vec::with_capacity(t);
        for tok in 0..t {
            let w = usage.weights.row(tok);
            let total = pairwise_sum(&w.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
            let inside = pairwise_sum(&kept.iter().map(|&x| f64::from(w[x])).collect::<Vec<_>>());
            cov.push(if total > 0.0 { inside / total } else { 0.0 });
            let row = logits.row(tok);
            let top = rank_order(row, TieRule::LowestIndex)[0];
            let masked_top = masked_selection(row, kept, 1)[0];
            agree.push(if top == masked_top { 1.0 } else { 0.0 });
        }
        let coverage = pairwise_sum(&cov) / t as f64;
        let agreement = pairwise_sum(&agree) / t as f64;
        all_cov.extend(cov);
        all_agree.extend(agree);
        layers.push(MaskLayerResult {
            layer_index: idx,
            coverage,
            agreement,
            tokens: t,
        });
    }
    Ok(MaskStudy {
        plan: plan.clone(),
        layers,
        coverage: pairwise_sum(&all_cov) / all_cov.len() as f64,
        agreement: pairwise_sum(&all_agree) / all_agree.len() as f64,
    })
}
