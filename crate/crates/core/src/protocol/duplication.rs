//! Cross-domain routing diagnostics under increasing input duplication.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::capture::{usage_from_logits, CaptureBundle, Gate};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{self, sequence_profile, frequency_similarity, mean_cosine, mean_hamming, pooled_similarity};
use crate::spectral::TieRule;
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct DuplicationInput {
    pub factor: u32,
    pub bundle: CaptureBundle,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DuplicationRow {
    pub factor: u32,
    pub layer_index: u32,
    /// Mean token cosine over the union of both sequences' tokens.
    pub token_cosine: f64,
    pub pooled_similarity: f64,
    /// Mean pairwise expert-set overlap over the union of both sequences' tokens.
    pub hamming: f64,
    pub frequency_similarity: f64,
    /// Domain pairs averaged into this row.
    pub pairs: usize,
}

/// For every factor and layer, the four diagnostics averaged over `domain_pairs`.
///
/// Factors must be strictly ascending and start at 1 (the undoubled baseline).
pub fn duplication_study(
    inputs: &[DuplicationInput],
    domain_pairs: &[(String, String)],
    pool_epsilon: f64,
) -> Result<Vec<DuplicationRow>> {
    let first = inputs.first().ok_or(Error::Empty { what: "duplication inputs" })?;
    if first.factor != 1 {
        return Err(Error::InvalidParameter {
            what: "duplication factors",
            reason: format!("baseline factor 1 is missing (first factor is {})", first.factor),
        });
    }
    if inputs.windows(2).any(|w| w[0].factor >= w[1].factor) {
        return Err(Error::InvalidParameter {
            what: "duplication factors",
            reason: "factors must be strictly ascending".into(),
        });
    }
    if domain_pairs.is_empty() {
        return Err(Error::Empty { what: "domain pairs" });
    }
    let layer_ids: Vec<u32> = first.bundle.layers.iter().map(|l| l.layer_index).collect();
    let mut rows = Vec::new();
    for input in inputs {
        let ids: Vec<u32> = input.bundle.layers.iter().map(|l| l.layer_index).collect();
        if ids != layer_ids {
            return Err(Error::LayerMismatch(format!(
                "factor {} has layers {ids:?}, baseline has {layer_ids:?}",
                input.factor
            )));
        }
        for layer in &input.bundle.layers {
            let usage = layer.usage_or_derive();
            let mut acc: [Vec<f64>; 4] = Default::default();
            for (a, b) in domain_pairs {
                let sa = input.bundle.sequence(a)?;
                let sb = input.bundle.sequence(b)?;
                let ha = layer.hidden_span_f64(sa.span());
                let hb = layer.hidden_span_f64(sb.span());
                let joint = ha.vstack(&hb)?;
                acc[0].push(mean_cosine(&joint)?.value);
                acc[1].push(pooled_similarity(&ha, &hb, pool_epsilon)?);
                acc[2].push(mean_hamming(&usage.gather(&[sa.span(), sb.span()]))?);
                let pa = sequence_profile(&usage, sa, layer.layer_index)?;
                let pb = sequence_profile(&usage, sb, layer.layer_index)?;
                acc[3].push(frequency_similarity(&pa, &pb)?);
            }
            rows.push(DuplicationRow {
                factor: input.factor,
                layer_index: layer.layer_index,
                token_cosine: stats::mean(&acc[0]),
                pooled_similarity: stats::mean(&acc[1]),
                hamming: stats::mean(&acc[2]),
                frequency_similarity: stats::mean(&acc[3]),
                pairs: domain_pairs.len(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AmplificationPoint {
    pub factor: u32,
    pub mean_hamming: f64,
    pub token_cosine: f64,
}

/// Routes `h_t = f μ + ξ_t` for each factor `f` with a fixed `ξ` and reports
/// how similar the tokens' expert sets and hidden states become.
pub fn amplification_surrogate(
    router: &Matrix,
    top_k: usize,
    mu: &[f64],
    xi: &Matrix,
    factors: &[u32],
) -> Result<Vec<AmplificationPoint>> {
    if mu.len() != xi.cols() || router.cols() != mu.len() {
        return Err(Error::DimensionMismatch {
            what: "surrogate dims",
            expected: router.cols(),
            actual: mu.len(),
        });
    }
    factors
        .iter()
        .map(|&f| {
            let h = Matrix::from_fn(xi.rows(), xi.cols(), |t, j| f64::from(f) * mu[j] + xi.get(t, j));
            let logits = h.matmul_transposed(router)?;
            let usage = usage_from_logits(&logits, top_k, Gate::Softmax, TieRule::LowestIndex)?;
            Ok(AmplificationPoint {
                factor: f,
                mean_hamming: metrics::mean_hamming(&usage)?,
                token_cosine: mean_cosine(&h)?.value,
            })
        })
        .collect()
}
