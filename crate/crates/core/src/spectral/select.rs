use alloc::vec::Vec;

use crate::error::{Error, Result};

/// How equal logits are ordered during top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TieRule {
    #[default]
    LowestIndex,
}

/// Indices of all entries sorted by decreasing value, ties by `tie_rule`.
pub fn rank_order(values: &[f64], tie_rule: TieRule) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    match tie_rule {
        TieRule::LowestIndex => {
            idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        }
    }
    idx
}

/// The `k` largest entries, returned in rank order (largest first).
pub fn top_k_select(logits: &[f64], k: usize, tie_rule: TieRule) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::OutOfRange {
            what: "top_k",
            value: k,
            min: 1,
            max: logits.len(),
        });
    }
    let mut order = rank_order(logits, tie_rule);
    order.truncate(k);
    Ok(order)
}
