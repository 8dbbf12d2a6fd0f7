//! Routing agreement after projecting hidden states onto their top-K
//! principal directions.

use alloc::vec::Vec;

use crate::capture::LayerRecord;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::spectral::{projector, rank_order, svd, TieRule};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TruncationPoint {
    pub k: usize,
    /// 1-based logit rank of the compared expert.
    pub m: usize,
    pub agreement: f64,
}

/// The expert at logit rank `m` (1-based) of each row.
pub fn rank_m_experts(logits: &Matrix, m: usize, tie_rule: TieRule) -> Vec<usize> {
    (0..logits.rows())
        .map(|t| rank_order(logits.row(t), tie_rule)[m - 1])
        .collect()
}

/// Agreement of the rank-`m` expert between `P h_t` and `P Π_K h_t` for every
/// `(K, m)` in the grids, ordered by `K` then `m` as given.
pub fn subspace_truncation_agreement(layer: &LayerRecord, k_grid: &[usize], m_grid: &[usize]) -> Result<Vec<TruncationPoint>> {
    if k_grid.is_empty() || m_grid.is_empty() {
        return Err(Error::Empty { what: "truncation grid" });
    }
    let h = layer.hidden_f64();
    let router = layer.router.weights_f64();
    let summary = svd(&h)?;
    let rank = summary.rank();
    let top_k = layer.router.top_k;
    for &m in m_grid {
        if m == 0 || m > top_k {
            return Err(Error::OutOfRange {
                what: "truncation m",
                value: m,
                min: 1,
                max: top_k,
            });
        }
    }
    for &k in k_grid {
        if k == 0 || k > rank {
            return Err(Error::OutOfRange {
                what: "truncation K",
                value: k,
                min: 1,
                max: rank,
            });
        }
    }
    let tie = layer.router.tie_rule;
    let full = h.matmul_transposed(&router)?;
    let reference: Vec<Vec<usize>> = m_grid.iter().map(|&m| rank_m_experts(&full, m, tie)).collect();
    let mut out = Vec::with_capacity(k_grid.len() * m_grid.len());
    for &k in k_grid {
        // Π_rank h_t = h_t for every data row, so the full rank reuses the
        // untruncated logits rather than their rounded reprojection.
        let logits = if k == rank {
            full.clone()
        } else {
            let proj = projector(&summary, k)?;
            let mut projected = Matrix::zeros(h.rows(), h.cols());
            for t in 0..h.rows() {
                projected.row_mut(t).copy_from_slice(&proj.apply(h.row(t)));
            }
            projected.matmul_transposed(&router)?
        };
        for (&m, want) in m_grid.iter().zip(&reference) {
            let got = rank_m_experts(&logits, m, tie);
            let same = got.iter().zip(want).filter(|(a, b)| a == b).count();
            out.push(TruncationPoint {
                k,
                m,
                agreement: same as f64 / h.rows() as f64,
            });
        }
    }
    Ok(out)
}
