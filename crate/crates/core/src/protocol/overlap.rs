//! Expert-overlap statistics grouped by which sequence labels two runs share.
//!
//! With keys `question, model, seed`, the pair classes include
//! `same-question,same-model,diff-seed` (resampled runs of one model),
//! `same-question,diff-model,*` (different models) and
//! `diff-question,same-model,*`. Every distinct match pattern is its own
//! class, so the classes always partition the pairs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::capture::CaptureBundle;
use crate::error::{Error, Result};
use crate::metrics::{overlap_at_p, sequence_profile, FrequencyProfile};
use crate::stats::Summary;

/// Keys used when none are given.
pub const DEFAULT_GROUP_KEYS: [&str; 3] = ["question", "model", "seed"];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OverlapCell {
    pub layer_index: u32,
    pub class: String,
    /// Per key, whether the two sequences carry the same label.
    pub matches: Vec<bool>,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Per-pair values in canonical pair order, for pooling.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OverlapGrid {
    pub model_id: String,
    pub axis_labels: Vec<String>,
    pub p: f64,
    /// Sorted by layer, then class name.
    pub cells: Vec<OverlapCell>,
}

impl OverlapGrid {
    pub fn cells_for_layer(&self, layer_index: u32) -> impl Iterator<Item = &OverlapCell> {
        self.cells.iter().filter(move |c| c.layer_index == layer_index)
    }
}

/// `same-a,diff-b,...` for a match vector.
pub fn class_name(keys: &[String], matches: &[bool]) -> String {
    let parts: Vec<String> = keys
        .iter()
        .zip(matches)
        .map(|(k, &m)| alloc::format!("{}-{k}", if m { "same" } else { "diff" }))
        .collect();
    parts.join(",")
}

pub fn overlap_grid(bundle: &CaptureBundle, p: f64, group_keys: &[String]) -> Result<OverlapGrid> {
    if group_keys.is_empty() {
        return Err(Error::Empty { what: "group keys" });
    }
    let mut labels: Vec<Vec<&str>> = Vec::with_capacity(bundle.sequences.len());
    for s in &bundle.sequences {
        let row = group_keys
            .iter()
            .map(|k| {
                s.label(k).ok_or_else(|| Error::MissingLabel {
                    sequence: s.sequence_id.clone(),
                    key: k.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        labels.push(row);
    }
    let n = bundle.sequences.len();
    let mut cells = Vec::new();
    for layer in &bundle.layers {
        let usage = layer.usage_or_derive();
        let profiles: Vec<FrequencyProfile> = bundle
            .sequences
            .iter()
            .map(|s| sequence_profile(&usage, s, layer.layer_index))
            .collect::<Result<_>>()?;
        let mut classes: BTreeMap<String, (Vec<bool>, Vec<f64>)> = BTreeMap::new();
        for i in 0..n {
            for j in i + 1..n {
                let matches: Vec<bool> = labels[i].iter().zip(&labels[j]).map(|(a, b)| a == b).collect();
                let v = overlap_at_p(&profiles[i], &profiles[j], p)?;
                classes
                    .entry(class_name(group_keys, &matches))
                    .or_insert_with(|| (matches, Vec::new()))
                    .1
                    .push(v);
            }
        }
        for (class, (matches, values)) in classes {
            let s = Summary::of(&values);
            cells.push(OverlapCell {
                layer_index: layer.layer_index,
                class,
                matches,
                mean: s.mean,
                std: s.std,
                count: s.count,
                values,
            });
        }
    }
    Ok(OverlapGrid {
        model_id: bundle.model_id.clone(),
        axis_labels: group_keys.to_vec(),
        p,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PooledCell {
    pub class: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Models contributing to this class.
    pub models: usize,
}

/// Pools every layer of every grid per class; the grids may come from models
/// with different expert counts.
pub fn pool_grids(grids: &[OverlapGrid]) -> Vec<PooledCell> {
    let mut classes: BTreeMap<&str, (Vec<f64>, Vec<&str>)> = BTreeMap::new();
    for g in grids {
        for c in &g.cells {
            let entry = classes.entry(&c.class).or_default();
            entry.0.extend_from_slice(&c.values);
            if !entry.1.contains(&g.model_id.as_str()) {
                entry.1.push(&g.model_id);
            }
        }
    }
    classes
        .into_iter()
        .map(|(class, (values, models))| {
            let s = Summary::of(&values);
            PooledCell {
                class: class.into(),
                mean: s.mean,
                std: s.std,
                count: s.count,
                models: models.len(),
            }
        })
        .collect()
}
