//! Frequency similarity of two sequences tracked token by token from the
//! prompt into the rollout.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::capture::{CaptureBundle, ExpertUsage, SequenceMeta};
use crate::error::{Error, Result};
use crate::metrics::{cosine, frequency_vector};

/// Default trailing-window width.
pub const DEFAULT_SLIDING_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Window {
    /// Prefix `[0, t)`.
    #[default]
    Cumulative,
    /// Trailing `[t − width, t)`, clipped at the sequence start.
    Sliding(usize),
    /// `[boundary, t)`: rollout tokens only; positions inside the prompt are skipped.
    RolloutOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RolloutPoint {
    /// Number of tokens seen, relative to each sequence start.
    pub position: usize,
    pub similarity: f64,
    /// Whether `position` is past both prompt boundaries.
    pub after_boundary: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RolloutCurve {
    pub layer_index: u32,
    pub sequence_a: String,
    pub sequence_b: String,
    pub window: Window,
    /// Prompt boundaries relative to each sequence start.
    pub boundary_a: usize,
    pub boundary_b: usize,
    pub points: Vec<RolloutPoint>,
}

fn relative_boundary(s: &SequenceMeta) -> Result<usize> {
    s.prompt_boundary
        .map(|b| b - s.start)
        .ok_or_else(|| Error::MissingBoundary {
            sequence: s.sequence_id.clone(),
        })
}

/// Absolute token span of `s` seen at relative position `t`; `None` when empty.
fn segment(s: &SequenceMeta, boundary: usize, t: usize, window: Window) -> Option<Range<usize>> {
    let end = t.min(s.len());
    let begin = match window {
        Window::Cumulative => 0,
        Window::Sliding(w) => end.saturating_sub(w),
        Window::RolloutOnly => boundary,
    };
    (begin < end).then(|| s.start + begin..s.start + end)
}

/// Positions `stride, 2 stride, …` up to the longer length, always ending on it.
pub fn position_grid(max_len: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut grid: Vec<usize> = (1..=max_len).filter(|t| t % stride == 0).collect();
    if grid.last() != Some(&max_len) && max_len > 0 {
        grid.push(max_len);
    }
    grid
}

fn curve_for(
    usage: &ExpertUsage,
    layer_index: u32,
    sa: &SequenceMeta,
    sb: &SequenceMeta,
    window: Window,
    stride: usize,
) -> Result<RolloutCurve> {
    if let Window::Sliding(0) = window {
        return Err(Error::InvalidParameter {
            what: "sliding window",
            reason: "width must be positive".into(),
        });
    }
    let (ba, bb) = (relative_boundary(sa)?, relative_boundary(sb)?);
    let mut points = Vec::new();
    for t in position_grid(sa.len().max(sb.len()), stride) {
        let (Some(ra), Some(rb)) = (segment(sa, ba, t, window), segment(sb, bb, t, window)) else {
            continue;
        };
        let pa = frequency_vector(usage, ra)?;
        let pb = frequency_vector(usage, rb)?;
        points.push(RolloutPoint {
            position: t,
            similarity: cosine(&pa, &pb)?,
            after_boundary: t > ba && t > bb,
        });
    }
    Ok(RolloutCurve {
        layer_index,
        sequence_a: sa.sequence_id.clone(),
        sequence_b: sb.sequence_id.clone(),
        window,
        boundary_a: ba,
        boundary_b: bb,
        points,
    })
}

/// Similarity curve for one pair of sequences at one layer.
pub fn rollout_tracking(
    bundle: &CaptureBundle,
    layer_index: u32,
    pair: (&str, &str),
    window: Window,
    stride: usize,
) -> Result<RolloutCurve> {
    let layer = bundle
        .layer(layer_index)
        .ok_or_else(|| Error::LayerMismatch(alloc::format!("layer {layer_index} not in bundle")))?;
    let sa = bundle.sequence(pair.0)?;
    let sb = bundle.sequence(pair.1)?;
    curve_for(&layer.usage_or_derive(), layer_index, sa, sb, window, stride)
}

/// [`rollout_tracking`] for every layer of the bundle.
pub fn rollout_tracking_all(bundle: &CaptureBundle, pair: (&str, &str), window: Window, stride: usize) -> Result<Vec<RolloutCurve>> {
    let sa = bundle.sequence(pair.0)?;
    let sb = bundle.sequence(pair.1)?;
    bundle
        .layers
        .iter()
        .map(|l| curve_for(&l.usage_or_derive(), l.layer_index, sa, sb, window, stride))
        .collect()
}
