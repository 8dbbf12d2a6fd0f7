//! Activation-capture data model.
//!
//! A [`CaptureBundle`] holds, for every analysed layer, the post-norm router
//! inputs `h_t`, the router matrix `P`, and optionally the recorded logits
//! and expert selections. Tensors are stored as `f32`; analyses widen them to
//! `f64` on access.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, Matrix};
use crate::spectral::{self, sigmoid, softmax};

pub use crate::spectral::TieRule;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_LOGITS_TOLERANCE: f64 = 1e-4;
/// Allowed drift of stored `f32` gate weights from a unit row sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-5;

/// Row-major `f32` matrix, the storage type of every capture tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct F32Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl F32Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "f32 tensor data length",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Rounds an `f64` matrix to `f32`.
    pub fn from_f64(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Matrix {
        Matrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction")
    }

    pub fn rows_f64(&self, span: Range<usize>) -> Matrix {
        let data = self.data[span.start * self.cols..span.end * self.cols]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        Matrix::new(span.end - span.start, self.cols, data).expect("span within tensor")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Binary `T x E` matrix of expert selections, one byte (0 or 1) per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<u8>,
}

impl MaskMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: alloc::vec![0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_set(&self, t: usize, e: usize) -> bool {
        self.bits[t * self.cols + e] != 0
    }

    pub fn set(&mut self, t: usize, e: usize) {
        self.bits[t * self.cols + e] = 1;
    }

    pub fn row_count(&self, t: usize) -> usize {
        self.row(t).iter().filter(|&&b| b != 0).count()
    }

    /// Experts selected by token `t`, ascending.
    pub fn selected(&self, t: usize) -> Vec<usize> {
        self.row(t)
            .iter()
            .enumerate()
            .filter_map(|(e, &b)| (b != 0).then_some(e))
            .collect()
    }
}

/// How routing weights are formed over the selected experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Gate {
    /// Softmax restricted to the selected logits.
    #[default]
    Softmax,
    /// Elementwise sigmoid, then normalised over the selected experts.
    SigmoidNormalize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterSpec {
    /// `E x D` router matrix `P`.
    pub weights: F32Matrix,
    pub top_k: usize,
    pub gate: Gate,
    pub tie_rule: TieRule,
}

impl RouterSpec {
    pub fn num_experts(&self) -> usize {
        self.weights.rows
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn weights_f64(&self) -> Matrix {
        self.weights.to_f64()
    }
}

/// Per-token expert masks `m_t` and the gate weights on the selected slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertUsage {
    pub top_k: usize,
    pub masks: MaskMatrix,
    /// `T x E`, zero outside the mask.
    pub weights: F32Matrix,
}

impl ExpertUsage {
    pub fn tokens(&self) -> usize {
        self.masks.rows
    }

    pub fn num_experts(&self) -> usize {
        self.masks.cols
    }

    /// Usage restricted to a token span.
    pub fn slice(&self, span: Range<usize>) -> ExpertUsage {
        let e = self.masks.cols;
        ExpertUsage {
            top_k: self.top_k,
            masks: MaskMatrix {
                rows: span.end - span.start,
                cols: e,
                bits: self.masks.bits[span.start * e..span.end * e].to_vec(),
            },
            weights: F32Matrix {
                rows: span.end - span.start,
                cols: e,
                data: self.weights.data[span.start * e..span.end * e].to_vec(),
            },
        }
    }

    /// Concatenates the usage of several spans (in order).
    pub fn gather(&self, spans: &[Range<usize>]) -> ExpertUsage {
        let e = self.masks.cols;
        let mut bits = Vec::new();
        let mut data = Vec::new();
        let mut rows = 0;
        for s in spans {
            bits.extend_from_slice(&self.masks.bits[s.start * e..s.end * e]);
            data.extend_from_slice(&self.weights.data[s.start * e..s.end * e]);
            rows += s.end - s.start;
        }
        ExpertUsage {
            top_k: self.top_k,
            masks: MaskMatrix { rows, cols: e, bits },
            weights: F32Matrix { rows, cols: e, data },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub layer_index: u32,
    /// `T_total x D` post-norm router inputs.
    pub hidden_states: F32Matrix,
    pub router: RouterSpec,
    pub usage: Option<ExpertUsage>,
    /// `T_total x E` logits as recorded by the capture source.
    pub logits: Option<F32Matrix>,
}

impl LayerRecord {
    pub fn tokens(&self) -> usize {
        self.hidden_states.rows
    }

    pub fn hidden_f64(&self) -> Matrix {
        self.hidden_states.to_f64()
    }

    pub fn hidden_span_f64(&self, span: Range<usize>) -> Matrix {
        self.hidden_states.rows_f64(span)
    }

    /// `G = H Pᵀ`, computed in `f64` from the stored tensors.
    pub fn computed_logits(&self) -> Matrix {
        self.hidden_f64()
            .matmul_transposed(&self.router.weights_f64())
            .expect("hidden and router dims validated")
    }

    /// Stored usage if present, otherwise derived from the router.
    pub fn usage_or_derive(&self) -> Cow<'_, ExpertUsage> {
        match &self.usage {
            Some(u) => Cow::Borrowed(u),
            None => Cow::Owned(derive_usage(self)),
        }
    }

    /// Largest `|stored logit − (P h)|` entry, if logits were recorded.
    pub fn max_logit_deviation(&self) -> Option<f64> {
        let stored = self.logits.as_ref()?;
        if stored.rows != self.tokens() || stored.cols != self.router.num_experts() {
            return None;
        }
        Some(stored.to_f64().max_abs_diff(&self.computed_logits()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SequenceMeta {
    pub sequence_id: String,
    pub start: usize,
    pub end: usize,
    pub prompt_boundary: Option<usize>,
    pub labels: BTreeMap<String, String>,
}

impl SequenceMeta {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureBundle {
    pub format_version: u32,
    pub model_id: String,
    /// Absolute tolerance for recorded logits against `P h`.
    pub logits_tolerance: f64,
    /// Shared (always-on) experts excluded from `E`, informational only.
    pub shared_experts: u32,
    pub layers: Vec<LayerRecord>,
    pub sequences: Vec<SequenceMeta>,
}

/// A single invariant failure, addressed by field path and index.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Violation {
    pub field: String,
    pub index: Option<usize>,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, index: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            index,
            message: message.into(),
        }
    }
}

impl CaptureBundle {
    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(SequenceMeta::len).sum()
    }

    pub fn sequence(&self, id: &str) -> Result<&SequenceMeta> {
        self.sequences
            .iter()
            .find(|s| s.sequence_id == id)
            .ok_or_else(|| Error::UnknownSequence(id.to_string()))
    }

    pub fn layer(&self, layer_index: u32) -> Option<&LayerRecord> {
        self.layers.iter().find(|l| l.layer_index == layer_index)
    }

    /// Index of the first token of every sequence.
    pub fn first_tokens(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.start).collect()
    }

    /// Checks every type invariant and returns all violations found.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.format_version != FORMAT_VERSION {
            out.push(Violation::new(
                "format_version",
                None,
                format!("unsupported version {}", self.format_version),
            ));
        }
        if !(self.logits_tolerance.is_finite() && self.logits_tolerance >= 0.0) {
            out.push(Violation::new(
                "logits_tolerance",
                None,
                "must be finite and nonnegative",
            ));
        }
        self.check_sequences(&mut out);
        let total = self.total_tokens();
        let mut seen = alloc::collections::BTreeSet::new();
        for (li, layer) in self.layers.iter().enumerate() {
            if !seen.insert(layer.layer_index) {
                out.push(Violation::new(
                    format!("layers[{li}].layer_index"),
                    Some(li),
                    format!("duplicate layer index {}", layer.layer_index),
                ));
            }
            check_layer(li, layer, total, self.logits_tolerance, &mut out);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    fn check_sequences(&self, out: &mut Vec<Violation>) {
        let mut cursor = 0usize;
        let mut ids = alloc::collections::BTreeSet::new();
        for (i, s) in self.sequences.iter().enumerate() {
            let field = format!("sequences[{i}]");
            if !ids.insert(s.sequence_id.as_str()) {
                out.push(Violation::new(
                    format!("{field}.sequence_id"),
                    Some(i),
                    format!("duplicate sequence id {:?}", s.sequence_id),
                ));
            }
            if s.start >= s.end {
                out.push(Violation::new(
                    format!("{field}.token_span"),
                    Some(i),
                    format!("empty or inverted span [{}, {})", s.start, s.end),
                ));
            }
            if s.start != cursor {
                out.push(Violation::new(
                    format!("{field}.token_span"),
                    Some(i),
                    format!("span starts at {} but previous span ended at {cursor}", s.start),
                ));
            }
            if let Some(b) = s.prompt_boundary {
                if b < s.start || b > s.end {
                    out.push(Violation::new(
                        format!("{field}.prompt_boundary"),
                        Some(i),
                        format!("boundary {b} outside [{}, {}]", s.start, s.end),
                    ));
                }
            }
            cursor = s.end.max(cursor);
        }
    }
}

fn check_layer(li: usize, layer: &LayerRecord, total: usize, tol: f64, out: &mut Vec<Violation>) {
    let field = format!("layers[{li}]");
    let h = &layer.hidden_states;
    let p = &layer.router.weights;
    let (e, d) = (p.rows, p.cols);

    if h.rows != total {
        out.push(Violation::new(
            format!("{field}.hidden_states"),
            Some(li),
            format!("{} token rows, sequences cover {total}", h.rows),
        ));
    }
    if h.cols != d {
        out.push(Violation::new(
            format!("{field}.hidden_states"),
            Some(li),
            format!("hidden dim {} but router expects {d}", h.cols),
        ));
    }
    if h.data.iter().any(|v| !v.is_finite()) {
        out.push(Violation::new(format!("{field}.hidden_states"), Some(li), "non-finite entry"));
    }
    if p.data.iter().any(|v| !v.is_finite()) {
        out.push(Violation::new(format!("{field}.router.weights"), Some(li), "non-finite entry"));
    }
    if e == 0 || d == 0 {
        out.push(Violation::new(format!("{field}.router.weights"), Some(li), "empty router"));
        return;
    }
    for row in 0..e {
        if p.row(row).iter().all(|&v| v == 0.0) {
            out.push(Violation::new(
                format!("{field}.router.weights"),
                Some(row),
                format!("router row {row} is all zero"),
            ));
        }
    }
    let k = layer.router.top_k;
    if k == 0 || k > e {
        out.push(Violation::new(
            format!("{field}.router.top_k"),
            Some(li),
            format!("top_k {k} outside [1, {e}]"),
        ));
    }

    let shapes_ok = h.rows == total && h.cols == d;
    if let Some(logits) = &layer.logits {
        if logits.rows != h.rows || logits.cols != e {
            out.push(Violation::new(
                format!("{field}.logits"),
                Some(li),
                format!("shape {}x{}, expected {}x{e}", logits.rows, logits.cols, h.rows),
            ));
        } else if shapes_ok {
            let dev = layer.max_logit_deviation().unwrap_or(f64::NAN);
            if !(dev <= tol) {
                out.push(Violation::new(
                    format!("{field}.logits"),
                    Some(li),
                    format!(
                        "layer {}: max |logit - P·h| = {dev:e} exceeds tolerance {tol:e}",
                        layer.layer_index
                    ),
                ));
            }
        }
    }

    if let Some(u) = &layer.usage {
        check_usage(&field, li, u, h.rows, e, k, out);
    }
}

fn check_usage(
    field: &str,
    li: usize,
    u: &ExpertUsage,
    t: usize,
    e: usize,
    k: usize,
    out: &mut Vec<Violation>,
) {
    if u.masks.rows != t || u.masks.cols != e || u.weights.rows != t || u.weights.cols != e {
        out.push(Violation::new(
            format!("{field}.usage"),
            Some(li),
            format!("usage tensors must be {t}x{e}"),
        ));
        return;
    }
    if u.top_k != k {
        out.push(Violation::new(
            format!("{field}.usage"),
            Some(li),
            format!("usage top_k {} differs from router top_k {k}", u.top_k),
        ));
    }
    if u.masks.bits.iter().any(|&b| b > 1) {
        out.push(Violation::new(format!("{field}.usage.masks"), Some(li), "mask entries must be 0 or 1"));
    }
    for tok in 0..t {
        let count = u.masks.row_count(tok);
        if count != k {
            out.push(Violation::new(
                format!("{field}.usage.masks"),
                Some(tok),
                format!("token {tok} selects {count} experts, expected {k}"),
            ));
            continue;
        }
        let row = u.weights.row(tok);
        let mut in_mask = Vec::with_capacity(k);
        for (ex, &w) in row.iter().enumerate() {
            if !(w >= 0.0) {
                out.push(Violation::new(
                    format!("{field}.usage.weights"),
                    Some(tok),
                    format!("token {tok} expert {ex}: negative or non-finite weight"),
                ));
            }
            if u.masks.is_set(tok, ex) {
                in_mask.push(f64::from(w));
            } else if w != 0.0 {
                out.push(Violation::new(
                    format!("{field}.usage.weights"),
                    Some(tok),
                    format!("token {tok} expert {ex}: weight outside mask"),
                ));
            }
        }
        let sum = pairwise_sum(&in_mask);
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            out.push(Violation::new(
                format!("{field}.usage.weights"),
                Some(tok),
                format!("token {tok}: selected weights sum to {sum}"),
            ));
        }
    }
}

/// Selected experts and their gate weights (`f64`) for one logit row.
pub fn route_logits(logits: &[f64], top_k: usize, gate: Gate, tie_rule: TieRule) -> Result<(Vec<usize>, Vec<f64>)> {
    let selected = spectral::top_k_select(logits, top_k, tie_rule)?;
    let picked: Vec<f64> = selected.iter().map(|&e| logits[e]).collect();
    let w = match gate {
        Gate::Softmax => softmax(&picked),
        Gate::SigmoidNormalize => {
            let s: Vec<f64> = picked.iter().map(|&z| sigmoid(z)).collect();
            let total = pairwise_sum(&s);
            s.into_iter().map(|v| v / total).collect()
        }
    };
    Ok((selected, w))
}

/// Masks and gate weights from a `T x E` logit matrix.
pub fn usage_from_logits(logits: &Matrix, top_k: usize, gate: Gate, tie_rule: TieRule) -> Result<ExpertUsage> {
    let (t, e) = (logits.rows(), logits.cols());
    let mut masks = MaskMatrix::zeros(t, e);
    let mut weights = alloc::vec![0.0f32; t * e];
    for tok in 0..t {
        let (sel, w) = route_logits(logits.row(tok), top_k, gate, tie_rule)?;
        for (&ex, &wv) in sel.iter().zip(&w) {
            masks.set(tok, ex);
            weights[tok * e + ex] = wv as f32;
        }
    }
    Ok(ExpertUsage {
        top_k,
        masks,
        weights: F32Matrix {
            rows: t,
            cols: e,
            data: weights,
        },
    })
}

/// Recomputes `g = P h`, the top-k masks and the gate weights for a layer.
pub fn derive_usage(layer: &LayerRecord) -> ExpertUsage {
    let r = &layer.router;
    usage_from_logits(&layer.computed_logits(), r.top_k, r.gate, r.tie_rule)
        .expect("router top_k validated")
}
