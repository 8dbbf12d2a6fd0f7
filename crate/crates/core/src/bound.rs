//! Data-aware logit-distance bounds.
//!
//! For a data matrix `H` with top-`r` principal projector `Π_r` and router
//! `P`, every token pair satisfies
//!
//! ```text
//! ‖P h_i − P h_j‖ ≤ ‖P Π_r‖ · ‖Π_r (h_i − h_j)‖ + ‖P (I − Π_r)(h_i − h_j)‖
//! ```
//!
//! which is much tighter than `‖P‖ · ‖h_i − h_j‖` when the data variance sits
//! in a few directions. This module evaluates every term per pair, the
//! router/data alignment curve over `r`, and the pairwise distance scatter.

use alloc::vec::Vec;

use crate::capture::{CaptureBundle, LayerRecord};
use crate::error::{Error, Result};
use crate::linalg::{norm2, sub, Matrix};
use crate::metrics;
use crate::pairs::PairPlan;
use crate::spectral::{self, operator_norm, Projector, SpectralSummary};
use crate::stats;

/// Energy fraction used to pick `r` when none is given.
pub const DEFAULT_ENERGY_FRACTION: f64 = 0.99;
/// Relative slack (against the naive bound) allowed in the bound check.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundReport {
    pub i: usize,
    pub j: usize,
    /// `‖P h_i − P h_j‖`
    pub logit_distance: f64,
    /// `‖P Π_r‖`
    pub alignment: f64,
    /// `‖Π_r δ‖`
    pub projected_distance: f64,
    /// `‖P (I − Π_r) δ‖`
    pub residual: f64,
    pub sharp_bound: f64,
    /// `‖P‖ ‖δ‖`
    pub naive_bound: f64,
    /// `‖(I − Π_r) δ‖ / ‖Π_r δ‖`; zero when `δ = 0`, infinite when only the
    /// complement is hit.
    pub residual_ratio: f64,
}

impl BoundReport {
    /// `logit_distance − sharp_bound`, positive means a violation.
    pub fn excess(&self) -> f64 {
        self.logit_distance - self.sharp_bound
    }

    pub fn holds(&self) -> bool {
        self.excess() <= BOUND_SLACK * self.naive_bound
    }
}

/// Which tokens define the principal subspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SubspaceMode {
    /// One SVD over all tokens of the layer.
    #[default]
    Pooled,
    /// One SVD per sequence; only within-sequence pairs are evaluated.
    PerSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairSelection {
    All(PairPlan),
    List(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundSet {
    pub layer_index: u32,
    /// `None` for the pooled subspace, else the sequence index.
    pub sequence: Option<usize>,
    pub r: usize,
    pub rank: usize,
    pub alignment: f64,
    pub router_norm: f64,
    pub subsampled: bool,
    pub reports: Vec<BoundReport>,
}

impl BoundSet {
    pub fn violations(&self) -> usize {
        self.reports.iter().filter(|r| !r.holds()).count()
    }
}

/// Everything needed to bound pairs against one subspace.
struct BoundContext<'a> {
    router: &'a Matrix,
    projector: Projector,
    alignment: f64,
    router_norm: f64,
}

impl BoundContext<'_> {
    fn report(&self, i: usize, j: usize, hi: &[f64], hj: &[f64]) -> BoundReport {
        let delta = sub(hi, hj);
        let delta_norm = norm2(&delta);
        let p_delta = self.router.mul_vec(&delta);
        let proj = self.projector.apply(&delta);
        let comp: Vec<f64> = delta.iter().zip(&proj).map(|(a, b)| a - b).collect();
        let logit_distance = norm2(&p_delta);
        let projected_distance = norm2(&proj);
        let residual = norm2(&self.router.mul_vec(&comp));
        let comp_norm = norm2(&comp);
        let residual_ratio = if projected_distance > 0.0 {
            comp_norm / projected_distance
        } else if comp_norm > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        BoundReport {
            i,
            j,
            logit_distance,
            alignment: self.alignment,
            projected_distance,
            residual,
            sharp_bound: self.alignment * projected_distance + residual,
            naive_bound: self.router_norm * delta_norm,
            residual_ratio,
        }
    }
}

/// `r` reaching [`DEFAULT_ENERGY_FRACTION`] of the spectral energy.
pub fn default_rank(summary: &SpectralSummary) -> usize {
    summary.rank_for_energy(DEFAULT_ENERGY_FRACTION).max(1)
}

/// `‖P Π_r‖ = ‖P V_r‖` since `V_r` has orthonormal columns.
pub fn alignment_norm(router: &Matrix, projector: &Projector) -> Result<f64> {
    operator_norm(&router.matmul(&projector.basis())?)
}

fn check_r(r: usize, rank: usize) -> Result<()> {
    if r == 0 || r > rank {
        return Err(Error::OutOfRange {
            what: "subspace rank r",
            value: r,
            min: 1,
            max: rank,
        });
    }
    Ok(())
}

fn bound_on(
    layer_index: u32,
    sequence: Option<usize>,
    hidden: &Matrix,
    index_offset: usize,
    router: &Matrix,
    r: Option<usize>,
    pairs: &[(usize, usize)],
    subsampled: bool,
) -> Result<BoundSet> {
    let summary = spectral::svd(hidden)?;
    let r = r.unwrap_or_else(|| default_rank(&summary));
    check_r(r, summary.rank())?;
    let projector = spectral::projector(&summary, r)?;
    let ctx = BoundContext {
        router,
        alignment: alignment_norm(router, &projector)?,
        router_norm: operator_norm(router)?,
        projector,
    };
    let reports = pairs
        .iter()
        .map(|&(i, j)| {
            ctx.report(
                i,
                j,
                hidden.row(i - index_offset),
                hidden.row(j - index_offset),
            )
        })
        .collect();
    Ok(BoundSet {
        layer_index,
        sequence,
        r,
        rank: summary.rank(),
        alignment: ctx.alignment,
        router_norm: ctx.router_norm,
        subsampled,
        reports,
    })
}

/// Bound terms for token pairs of one layer.
///
/// `r = None` picks the smallest rank with 99% of the spectral energy. In
/// [`SubspaceMode::PerSequence`] one set is returned per sequence; an explicit
/// pair list is then filtered to within-sequence pairs.
pub fn bound_report(
    bundle: &CaptureBundle,
    layer: &LayerRecord,
    r: Option<usize>,
    selection: &PairSelection,
    mode: SubspaceMode,
) -> Result<Vec<BoundSet>> {
    let router = layer.router.weights_f64();
    let t = layer.tokens();
    match mode {
        SubspaceMode::Pooled => {
            let hidden = layer.hidden_f64();
            let (pairs, subsampled) = match selection {
                PairSelection::All(plan) => {
                    let s = plan.select(t);
                    (s.pairs, s.subsampled)
                }
                PairSelection::List(l) => (canonical_pairs(l, t)?, false),
            };
            Ok(alloc::vec![bound_on(
                layer.layer_index,
                None,
                &hidden,
                0,
                &router,
                r,
                &pairs,
                subsampled
            )?])
        }
        SubspaceMode::PerSequence => bundle
            .sequences
            .iter()
            .enumerate()
            .map(|(si, seq)| {
                let span = seq.span();
                let (pairs, subsampled) = match selection {
                    PairSelection::All(plan) => {
                        let s = plan.select_within(core::slice::from_ref(&span));
                        (s.pairs, s.subsampled)
                    }
                    PairSelection::List(l) => (
                        canonical_pairs(l, t)?
                            .into_iter()
                            .filter(|(i, j)| span.contains(i) && span.contains(j))
                            .collect(),
                        false,
                    ),
                };
                let hidden = layer.hidden_span_f64(span.clone());
                bound_on(
                    layer.layer_index,
                    Some(si),
                    &hidden,
                    span.start,
                    &router,
                    r,
                    &pairs,
                    subsampled,
                )
            })
            .collect(),
    }
}

/// Orders each pair as `(min, max)`, sorts and deduplicates.
fn canonical_pairs(list: &[(usize, usize)], t: usize) -> Result<Vec<(usize, usize)>> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(list.len());
    for &(a, b) in list {
        let hi = a.max(b);
        if hi >= t {
            return Err(Error::OutOfRange {
                what: "pair token index",
                value: hi,
                min: 0,
                max: t.saturating_sub(1),
            });
        }
        out.push((a.min(b), hi));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Quantiles of the residual ratio and of the relative bound slack.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundSummary {
    pub pairs: usize,
    pub violations: usize,
    pub quantile_levels: Vec<f64>,
    pub residual_ratio_quantiles: Vec<f64>,
    /// `(sharp − logit) / naive`, per quantile level.
    pub slack_quantiles: Vec<f64>,
    /// `sharp / naive`, per quantile level.
    pub sharpness_quantiles: Vec<f64>,
}

pub const SUMMARY_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

pub fn summarize(reports: &[BoundReport]) -> BoundSummary {
    let ratios: Vec<f64> = reports.iter().map(|r| r.residual_ratio).collect();
    let nonzero: Vec<&BoundReport> = reports.iter().filter(|r| r.naive_bound > 0.0).collect();
    let slack: Vec<f64> = nonzero
        .iter()
        .map(|r| (r.sharp_bound - r.logit_distance) / r.naive_bound)
        .collect();
    let sharp: Vec<f64> = nonzero.iter().map(|r| r.sharp_bound / r.naive_bound).collect();
    let q = |v: &[f64]| SUMMARY_QUANTILES.iter().map(|&l| stats::quantile(v, l)).collect();
    BoundSummary {
        pairs: reports.len(),
        violations: reports.iter().filter(|r| !r.holds()).count(),
        quantile_levels: SUMMARY_QUANTILES.to_vec(),
        residual_ratio_quantiles: q(&ratios),
        slack_quantiles: q(&slack),
        sharpness_quantiles: q(&sharp),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DistanceKind {
    /// L2 divided by the square root of the space dimension.
    #[default]
    Rms,
    L2,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScatterSeries {
    pub layer_index: u32,
    pub distance_kind: DistanceKind,
    pub pairs: Vec<(usize, usize)>,
    /// `(hidden distance, logit distance)` per pair.
    pub points: Vec<(f64, f64)>,
    /// Pair touches the first token of some sequence.
    pub outlier_flags: Vec<bool>,
    pub subsampled: bool,
    pub seed: u64,
}

/// Hidden-state vs logit distances for all (or a sampled set of) token pairs.
///
/// Pairs touching the first token of a sequence are flagged; with
/// `exclude_first_token` they are also left out of the series.
pub fn triangle_scatter(
    bundle: &CaptureBundle,
    layer: &LayerRecord,
    kind: DistanceKind,
    exclude_first_token: bool,
    plan: PairPlan,
) -> Result<ScatterSeries> {
    let t = layer.tokens();
    if t < 2 {
        return Err(Error::OutOfRange {
            what: "scatter tokens",
            value: t,
            min: 2,
            max: usize::MAX,
        });
    }
    let hidden = layer.hidden_f64();
    let logits = layer.computed_logits();
    let firsts = bundle.first_tokens();
    let mut is_first = alloc::vec![false; t];
    for f in firsts {
        if f < t {
            is_first[f] = true;
        }
    }
    let set = plan.select(t);
    let mut out = ScatterSeries {
        layer_index: layer.layer_index,
        distance_kind: kind,
        pairs: Vec::new(),
        points: Vec::new(),
        outlier_flags: Vec::new(),
        subsampled: set.subsampled,
        seed: set.seed,
    };
    for (i, j) in set.pairs {
        let flag = is_first[i] || is_first[j];
        if flag && exclude_first_token {
            continue;
        }
        let point = match kind {
            DistanceKind::Rms => (
                metrics::rms_distance(hidden.row(i), hidden.row(j))?,
                metrics::rms_distance(logits.row(i), logits.row(j))?,
            ),
            DistanceKind::L2 => (
                norm2(&sub(hidden.row(i), hidden.row(j))),
                norm2(&sub(logits.row(i), logits.row(j))),
            ),
        };
        out.pairs.push((i, j));
        out.points.push(point);
        out.outlier_flags.push(flag);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlignmentPoint {
    pub r: usize,
    /// `‖P Π_r‖`
    pub aligned: f64,
    /// `‖P (I − Π_r)‖`
    pub residual: f64,
}

/// Router/data alignment over a grid of subspace ranks.
pub fn router_data_alignment(
    router: &Matrix,
    summary: &SpectralSummary,
    r_grid: &[usize],
) -> Result<Vec<AlignmentPoint>> {
    r_grid
        .iter()
        .map(|&r| {
            check_r(r, summary.rank())?;
            let proj = spectral::projector(summary, r)?;
            let aligned = alignment_norm(router, &proj)?;
            let p_pi = proj.right_multiply(router)?;
            let residual = operator_norm(&router.sub(&p_pi)?)?;
            Ok(AlignmentPoint { r, aligned, residual })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{F32Matrix, Gate, RouterSpec, SequenceMeta, TieRule, FORMAT_VERSION};
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn toy(hidden: Vec<Vec<f32>>, router: Vec<Vec<f32>>) -> CaptureBundle {
        let t = hidden.len();
        let d = hidden[0].len();
        let e = router.len();
        CaptureBundle {
            format_version: FORMAT_VERSION,
            model_id: "toy".into(),
            logits_tolerance: 1e-4,
            shared_experts: 0,
            layers: vec![LayerRecord {
                layer_index: 0,
                hidden_states: F32Matrix::new(t, d, hidden.concat()).unwrap(),
                router: RouterSpec {
                    weights: F32Matrix::new(e, d, router.concat()).unwrap(),
                    top_k: 1,
                    gate: Gate::Softmax,
                    tie_rule: TieRule::LowestIndex,
                },
                usage: None,
                logits: None,
            }],
            sequences: vec![SequenceMeta {
                sequence_id: "s0".into(),
                start: 0,
                end: t,
                prompt_boundary: None,
                labels: BTreeMap::new(),
            }],
        }
    }

    #[test]
    fn identical_tokens_give_zero_bound() {
        let b = toy(
            vec![vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 1.0]],
            vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, -1.0]],
        );
        let set = bound_report(&b, &b.layers[0], Some(1), &PairSelection::List(vec![(0, 1)]), SubspaceMode::Pooled)
            .unwrap();
        let r = set[0].reports[0];
        assert_eq!((r.logit_distance, r.sharp_bound, r.residual_ratio), (0.0, 0.0, 0.0));
    }

    #[test]
    fn full_rank_projector_has_no_residual() {
        let b = toy(
            vec![vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.7, -1.1]],
            vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.2, 0.2]],
        );
        let sets = bound_report(&b, &b.layers[0], Some(2), &PairSelection::All(PairPlan::default()), SubspaceMode::Pooled)
            .unwrap();
        for r in &sets[0].reports {
            assert!(r.residual < 1e-12);
            assert!(r.holds());
            assert!(r.sharp_bound >= r.logit_distance - 1e-12);
        }
    }

    #[test]
    fn r_out_of_range() {
        let b = toy(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 1.0]]);
        let sel = PairSelection::All(PairPlan::default());
        assert!(bound_report(&b, &b.layers[0], Some(0), &sel, SubspaceMode::Pooled).is_err());
        assert!(bound_report(&b, &b.layers[0], Some(3), &sel, SubspaceMode::Pooled).is_err());
    }

    #[test]
    fn scatter_rms_is_scaled_l2() {
        let b = toy(
            vec![vec![1.0, 0.5, 0.0, 2.0], vec![-0.3, 2.0, 1.0, 0.0], vec![0.7, -1.1, 0.1, 0.1]],
            vec![vec![1.0, 2.0, 0.0, 0.0], vec![-1.0, 0.5, 1.0, 1.0]],
        );
        let l2 = triangle_scatter(&b, &b.layers[0], DistanceKind::L2, false, PairPlan::default()).unwrap();
        let rms = triangle_scatter(&b, &b.layers[0], DistanceKind::Rms, false, PairPlan::default()).unwrap();
        assert_eq!(l2.pairs, [(0, 1), (0, 2), (1, 2)]);
        for ((h, g), (hr, gr)) in l2.points.iter().zip(&rms.points) {
            assert!((h / 2.0 - hr).abs() < 1e-12);
            assert!((g / libm::sqrt(2.0) - gr).abs() < 1e-12);
        }
        assert_eq!(l2.outlier_flags, [true, true, false]);
        let excl = triangle_scatter(&b, &b.layers[0], DistanceKind::L2, true, PairPlan::default()).unwrap();
        assert_eq!(excl.pairs, [(1, 2)]);
    }

    #[test]
    fn orthogonal_router_has_zero_alignment() {
        // data along e1, router rows along e2 and e3
        let h = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]).unwrap();
        let s = spectral::svd(&h).unwrap();
        let p = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
        let a = router_data_alignment(&p, &s, &[1]).unwrap();
        assert!(a[0].aligned < 1e-15);
        assert!((a[0].residual - 3.0).abs() < 1e-9);
    }
}
