//! Token- and sequence-level routing metrics.
//!
//! Token-level: RMS distance, directional and retained energy, mean pairwise
//! cosine, mean pairwise Hamming similarity, router confidence.
//! Sequence-level: expert frequency profiles, their cosine similarity, pooled
//! hidden-state similarity, and the Jaccard overlap of top-`p` expert sets.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use crate::capture::{CaptureBundle, ExpertUsage, LayerRecord, SequenceMeta};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, pairwise_sum, Matrix};
use crate::spectral::{self, sigmoid, softmax, SpectralSummary, TieRule};
use crate::stats;

/// Default guard added to token norms before pooling.
pub const DEFAULT_POOL_EPSILON: f64 = 1e-12;
/// Slack when comparing a cumulative probability mass against `p`.
pub const MASS_TOLERANCE: f64 = 1e-12;

pub fn rms_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "rms_distance",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Empty { what: "rms_distance input" });
    }
    Ok(libm::sqrt(crate::linalg::dist2_sq(x, y) / x.len() as f64))
}

/// `Σ_{i=lo..hi} s_i² / Σ_j s_j²` with 1-based inclusive indices.
pub fn directional_energy(summary: &SpectralSummary, lo: usize, hi: usize) -> Result<f64> {
    let rank = summary.rank();
    if lo == 0 || lo > hi || hi > rank {
        return Err(Error::InvalidParameter {
            what: "energy range",
            reason: alloc::format!("need 1 <= lo <= hi <= rank ({rank}), got [{lo}, {hi}]"),
        });
    }
    let s = summary.singular_values();
    let num: Vec<f64> = s[lo - 1..hi].iter().map(|v| v * v).collect();
    Ok(pairwise_sum(&num) / summary.total_energy())
}

/// `(1/T) Σ_t ‖(P v) ⊙ m_t‖² / ‖P‖_F²` for a unit direction `v`.
pub fn retained_energy(router: &Matrix, usage: &ExpertUsage, v: &[f64]) -> Result<f64> {
    if v.len() != router.cols() {
        return Err(Error::DimensionMismatch {
            what: "retained_energy direction",
            expected: router.cols(),
            actual: v.len(),
        });
    }
    if usage.num_experts() != router.rows() {
        return Err(Error::DimensionMismatch {
            what: "retained_energy experts",
            expected: router.rows(),
            actual: usage.num_experts(),
        });
    }
    if libm::fabs(norm2(v) - 1.0) > 1e-8 {
        return Err(Error::InvalidParameter {
            what: "retained_energy direction",
            reason: "must have unit norm".to_string(),
        });
    }
    let t = usage.tokens();
    if t == 0 {
        return Err(Error::Empty { what: "retained_energy tokens" });
    }
    let pv = router.mul_vec(v);
    let sq: Vec<f64> = pv.iter().map(|x| x * x).collect();
    let per_token: Vec<f64> = (0..t)
        .map(|tok| {
            let picked: Vec<f64> = usage.masks.selected(tok).into_iter().map(|e| sq[e]).collect();
            pairwise_sum(&picked)
        })
        .collect();
    Ok(pairwise_sum(&per_token) / t as f64 / router.frobenius_norm_sq())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanCosine {
    pub value: f64,
    pub pairs: usize,
    /// Pairs dropped because one side had zero norm.
    pub excluded_pairs: usize,
}

/// Mean cosine over the strict lower triangle of the row kernel matrix.
pub fn mean_cosine(rows: &Matrix) -> Result<MeanCosine> {
    let t = rows.rows();
    if t < 2 {
        return Err(Error::OutOfRange {
            what: "mean_cosine rows",
            value: t,
            min: 2,
            max: usize::MAX,
        });
    }
    let unit: Vec<Vec<f64>> = (0..t)
        .filter_map(|i| {
            let r = rows.row(i);
            let n = norm2(r);
            (n > 0.0).then(|| r.iter().map(|x| x / n).collect())
        })
        .collect();
    let total_pairs = t * (t - 1) / 2;
    let valid = unit.len() * unit.len().saturating_sub(1) / 2;
    if valid == 0 {
        return Err(Error::NoValidPairs { excluded: total_pairs });
    }
    let per_row: Vec<f64> = (1..unit.len())
        .map(|i| {
            let d: Vec<f64> = (0..i).map(|j| dot(&unit[i], &unit[j])).collect();
            pairwise_sum(&d)
        })
        .collect();
    Ok(MeanCosine {
        value: pairwise_sum(&per_row) / valid as f64,
        pairs: valid,
        excluded_pairs: total_pairs - valid,
    })
}

/// Mean of `m_iᵀ m_j / E` over all unordered token pairs.
pub fn mean_hamming(usage: &ExpertUsage) -> Result<f64> {
    let t = usage.tokens();
    if t < 2 {
        return Err(Error::OutOfRange {
            what: "mean_hamming tokens",
            value: t,
            min: 2,
            max: usize::MAX,
        });
    }
    let e = usage.num_experts();
    let sel: Vec<Vec<usize>> = (0..t).map(|tok| usage.masks.selected(tok)).collect();
    let per_row: Vec<f64> = (1..t)
        .map(|i| {
            let shared: usize = (0..i)
                .map(|j| sel[i].iter().filter(|&&ex| usage.masks.is_set(j, ex)).count())
                .sum();
            shared as f64
        })
        .collect();
    let pairs = (t * (t - 1) / 2) as f64;
    Ok(pairwise_sum(&per_row) / pairs / e as f64)
}

/// Normalisation used when reading a confidence off raw logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ConfidenceConvention {
    /// Maximum softmax probability.
    #[default]
    Softmax,
    /// `max_e σ(g_e) / Σ_e σ(g_e)`.
    SigmoidNormalize,
}

pub fn token_confidence(logits: &[f64], convention: ConfidenceConvention) -> f64 {
    match convention {
        ConfidenceConvention::Softmax => softmax(logits).into_iter().fold(0.0, f64::max),
        ConfidenceConvention::SigmoidNormalize => {
            let s: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let total = pairwise_sum(&s);
            s.into_iter().fold(0.0, f64::max) / total
        }
    }
}

/// Mean over tokens of the maximum routing probability.
pub fn router_confidence(logits: &Matrix, convention: ConfidenceConvention) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::Empty { what: "router_confidence tokens" });
    }
    let per: Vec<f64> = (0..logits.rows())
        .map(|t| token_confidence(logits.row(t), convention))
        .collect();
    Ok(pairwise_sum(&per) / per.len() as f64)
}

/// Softmax router confidence of a layer, from recomputed logits.
pub fn layer_confidence(layer: &LayerRecord) -> Result<f64> {
    router_confidence(&layer.computed_logits(), ConfidenceConvention::Softmax)
}

/// Empirical expert-visit distribution `p = Σ_t m_t / (T K)` of one sequence.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrequencyProfile {
    pub sequence_id: String,
    pub layer_index: u32,
    pub p: Vec<f64>,
}

pub fn frequency_vector(usage: &ExpertUsage, span: Range<usize>) -> Result<Vec<f64>> {
    if span.start >= span.end || span.end > usage.tokens() {
        return Err(Error::Empty { what: "frequency profile span" });
    }
    let e = usage.num_experts();
    let mut counts = alloc::vec![0u64; e];
    for t in span.clone() {
        for (ex, c) in counts.iter_mut().enumerate() {
            if usage.masks.is_set(t, ex) {
                *c += 1;
            }
        }
    }
    let denom = ((span.end - span.start) * usage.top_k) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / denom).collect())
}

pub fn frequency_profile(
    usage: &ExpertUsage,
    span: Range<usize>,
    sequence_id: &str,
    layer_index: u32,
) -> Result<FrequencyProfile> {
    Ok(FrequencyProfile {
        sequence_id: sequence_id.to_string(),
        layer_index,
        p: frequency_vector(usage, span)?,
    })
}

pub fn sequence_profile(usage: &ExpertUsage, seq: &SequenceMeta, layer_index: u32) -> Result<FrequencyProfile> {
    frequency_profile(usage, seq.span(), &seq.sequence_id, layer_index)
}

/// Cosine of two vectors; zero when either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "cosine",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn frequency_similarity(a: &FrequencyProfile, b: &FrequencyProfile) -> Result<f64> {
    cosine(&a.p, &b.p)
}

/// Mean of `h_t / (‖h_t‖ + ε)` over the rows.
pub fn pooled_representation(rows: &Matrix, epsilon: f64) -> Result<Vec<f64>> {
    if rows.rows() == 0 {
        return Err(Error::Empty { what: "pooled sequence" });
    }
    let d = rows.cols();
    let normalised: Vec<Vec<f64>> = (0..rows.rows())
        .map(|t| {
            let r = rows.row(t);
            let n = norm2(r) + epsilon;
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    let mut col = alloc::vec![0.0; normalised.len()];
    Ok((0..d)
        .map(|j| {
            for (c, r) in col.iter_mut().zip(&normalised) {
                *c = r[j];
            }
            pairwise_sum(&col) / normalised.len() as f64
        })
        .collect())
}

pub fn pooled_similarity(a: &Matrix, b: &Matrix, epsilon: f64) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            what: "pooled_similarity hidden dim",
            expected: a.cols(),
            actual: b.cols(),
        });
    }
    cosine(&pooled_representation(a, epsilon)?, &pooled_representation(b, epsilon)?)
}

/// Smallest prefix of experts, sorted by decreasing frequency (lowest index
/// on ties), whose cumulative mass reaches `p`. Returned ascending.
pub fn top_p_set(profile: &[f64], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter {
            what: "top-p mass",
            reason: alloc::format!("{p} is outside (0, 1]"),
        });
    }
    let order = spectral::rank_order(profile, TieRule::LowestIndex);
    let mut set = Vec::new();
    let mut mass = 0.0;
    for e in order {
        set.push(e);
        mass += profile[e];
        if mass >= p - MASS_TOLERANCE {
            break;
        }
    }
    set.sort_unstable();
    Ok(set)
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

pub fn overlap_at_p(a: &FrequencyProfile, b: &FrequencyProfile, p: f64) -> Result<f64> {
    if a.p.len() != b.p.len() {
        return Err(Error::DimensionMismatch {
            what: "overlap_at_p experts",
            expected: a.p.len(),
            actual: b.p.len(),
        });
    }
    Ok(jaccard(&top_p_set(&a.p, p)?, &top_p_set(&b.p, p)?))
}

/// One metric over the sequences of one layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricSeries {
    pub metric_name: String,
    pub layer_index: u32,
    pub sequence_ids: Vec<String>,
    pub per_sequence_values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricSeries {
    fn new(name: &str, layer_index: u32, entries: Vec<(String, f64)>) -> Self {
        let (sequence_ids, per_sequence_values): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        Self {
            metric_name: name.to_string(),
            layer_index,
            mean: stats::mean(&per_sequence_values),
            std: stats::std_dev(&per_sequence_values),
            sequence_ids,
            per_sequence_values,
        }
    }
}

pub const PER_SEQUENCE_METRICS: [&str; 6] = [
    "energy_top1",
    "retained_energy_v1",
    "token_cosine_hidden",
    "token_cosine_logits",
    "hamming",
    "confidence",
];

/// Per-sequence token-level metrics for one layer. Sequences too short for a
/// metric (fewer than two tokens, or rank-deficient for energy) are skipped
/// for that metric only.
pub fn layer_metric_series(bundle: &CaptureBundle, layer: &LayerRecord) -> Result<Vec<MetricSeries>> {
    let usage = layer.usage_or_derive();
    let router = layer.router.weights_f64();
    let logits = layer.computed_logits();
    let mut cols: [Vec<(String, f64)>; 6] = Default::default();

    for seq in &bundle.sequences {
        let id = seq.sequence_id.clone();
        let hidden = layer.hidden_span_f64(seq.span());
        let seq_usage = usage.slice(seq.span());
        let seq_logits = logits.select_rows(seq.start, seq.end);

        let summary = spectral::svd(&hidden)?;
        if summary.rank() >= 1 {
            cols[0].push((id.clone(), directional_energy(&summary, 1, 1)?));
            cols[1].push((id.clone(), retained_energy(&router, &seq_usage, summary.right_vector(0))?));
        }
        if seq.len() >= 2 {
            if let Ok(c) = mean_cosine(&hidden) {
                cols[2].push((id.clone(), c.value));
            }
            if let Ok(c) = mean_cosine(&seq_logits) {
                cols[3].push((id.clone(), c.value));
            }
            cols[4].push((id.clone(), mean_hamming(&seq_usage)?));
        }
        cols[5].push((id, router_confidence(&seq_logits, ConfidenceConvention::Softmax)?));
    }

    Ok(PER_SEQUENCE_METRICS
        .iter()
        .zip(cols)
        .map(|(name, entries)| MetricSeries::new(name, layer.layer_index, entries))
        .collect())
}

/// Sequence-pair metrics for one layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SequencePairMetrics {
    pub layer_index: u32,
    pub sequence_a: String,
    pub sequence_b: String,
    pub frequency_similarity: f64,
    pub pooled_similarity: f64,
    pub overlap: f64,
}

pub fn sequence_pair_metrics(
    bundle: &CaptureBundle,
    layer: &LayerRecord,
    p: f64,
    epsilon: f64,
) -> Result<Vec<SequencePairMetrics>> {
    let usage = layer.usage_or_derive();
    let profiles: Vec<FrequencyProfile> = bundle
        .sequences
        .iter()
        .map(|s| frequency_profile(&usage, s.span(), &s.sequence_id, layer.layer_index))
        .collect::<Result<_>>()?;
    let hidden: Vec<Matrix> = bundle
        .sequences
        .iter()
        .map(|s| layer.hidden_span_f64(s.span()))
        .collect();
    let mut out = Vec::new();
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            out.push(SequencePairMetrics {
                layer_index: layer.layer_index,
                sequence_a: profiles[i].sequence_id.clone(),
                sequence_b: profiles[j].sequence_id.clone(),
                frequency_similarity: frequency_similarity(&profiles[i], &profiles[j])?,
                pooled_similarity: pooled_similarity(&hidden[i], &hidden[j], epsilon)?,
                overlap: overlap_at_p(&profiles[i], &profiles[j], p)?,
            });
        }
    }
    Ok(out)
}
