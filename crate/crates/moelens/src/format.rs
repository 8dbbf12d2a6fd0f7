//! The MOEC capture container.
//!
//! Little-endian layout:
//!
//! ```text
//! "MOEC" | version u32 | json_len u64 | metadata JSON (UTF-8)
//! per layer, per present tensor:
//!     layer_index u32 | kind u8 | rows u64 | cols u64 | payload
//! crc32 u32 over every preceding byte
//! ```
//!
//! Tensor kinds are hidden=0, router=1, logits=2, masks=3, weights=4, always
//! written in that order. Float payloads are `f32`, masks one byte (0/1) per
//! entry. The metadata records dimensions and which optional tensors are
//! present, so the expected file length is known before any payload is read.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use moelens_core::capture::{
    CaptureBundle, ExpertUsage, F32Matrix, Gate, LayerRecord, MaskMatrix, RouterSpec, SequenceMeta, Violation,
    FORMAT_VERSION,
};
use moelens_core::spectral::TieRule;
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"MOEC";
const PREAMBLE: usize = 4 + 4 + 8;
const BLOCK_HEADER: usize = 4 + 1 + 8 + 8;
const CRC_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TensorKind {
    Hidden = 0,
    Router = 1,
    Logits = 2,
    Masks = 3,
    Weights = 4,
}

impl TensorKind {
    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Self::Hidden,
            1 => Self::Router,
            2 => Self::Logits,
            3 => Self::Masks,
            4 => Self::Weights,
            _ => return None,
        })
    }

    fn elem_size(self) -> usize {
        if self == Self::Masks {
            1
        } else {
            4
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected \"MOEC\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated capture: {available} bytes available, {expected} expected (data ends at byte offset {available})")]
    Truncated { available: u64, expected: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("metadata block: {0}")]
    Metadata(String),
    #[error("malformed block at byte offset {offset}: {message}")]
    Structure { offset: u64, message: String },
    #[error("capture encodes an inconsistent bundle: {0}")]
    Unencodable(String),
    #[error("capture violates {} invariant(s)", .0.len())]
    Validation(Vec<Violation>),
}

impl FormatError {
    /// Stable short name of the error class.
    pub fn class(&self) -> &'static str {
        match self {
            Self::Io(_) => "io",
            Self::BadMagic { .. } => "bad_magic",
            Self::UnsupportedVersion(_) => "version",
            Self::Truncated { .. } => "truncated",
            Self::ChecksumMismatch { .. } => "checksum",
            Self::Metadata(_) => "metadata",
            Self::Structure { .. } => "structure",
            Self::Unencodable(_) => "unencodable",
            Self::Validation(_) => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerMeta {
    layer_index: u32,
    tokens: usize,
    hidden_dim: usize,
    experts: usize,
    top_k: usize,
    gate: Gate,
    tie_rule: TieRule,
    has_logits: bool,
    /// `top_k` recorded with the usage tensors, when present.
    usage_top_k: Option<usize>,
}

impl LayerMeta {
    fn blocks(&self) -> Vec<(TensorKind, usize, usize)> {
        let mut b = vec![
            (TensorKind::Hidden, self.tokens, self.hidden_dim),
            (TensorKind::Router, self.experts, self.hidden_dim),
        ];
        if self.has_logits {
            b.push((TensorKind::Logits, self.tokens, self.experts));
        }
        if self.usage_top_k.is_some() {
            b.push((TensorKind::Masks, self.tokens, self.experts));
            b.push((TensorKind::Weights, self.tokens, self.experts));
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    model_id: String,
    logits_tolerance: f64,
    shared_experts: u32,
    sequences: Vec<SequenceMeta>,
    layers: Vec<LayerMeta>,
}

fn layer_meta(l: &LayerRecord) -> Result<LayerMeta, FormatError> {
    let tokens = l.hidden_states.rows;
    let hidden_dim = l.hidden_states.cols;
    let experts = l.router.weights.rows;
    let bad = |what: &str| {
        Err(FormatError::Unencodable(format!(
            "layer {}: {what} does not match hidden {tokens}x{hidden_dim} / router {experts}x{}",
            l.layer_index, l.router.weights.cols
        )))
    };
    if l.router.weights.cols != hidden_dim {
        return bad("router width");
    }
    if let Some(g) = &l.logits {
        if (g.rows, g.cols) != (tokens, experts) {
            return bad("logits shape");
        }
    }
    if let Some(u) = &l.usage {
        let shapes = [(u.masks.rows, u.masks.cols), (u.weights.rows, u.weights.cols)];
        if shapes.iter().any(|&s| s != (tokens, experts)) {
            return bad("usage shape");
        }
    }
    Ok(LayerMeta {
        layer_index: l.layer_index,
        tokens,
        hidden_dim,
        experts,
        top_k: l.router.top_k,
        gate: l.router.gate,
        tie_rule: l.router.tie_rule,
        has_logits: l.logits.is_some(),
        usage_top_k: l.usage.as_ref().map(|u| u.top_k),
    })
}

fn put_block(out: &mut Vec<u8>, layer: u32, kind: TensorKind, rows: usize, cols: usize) {
    out.extend_from_slice(&layer.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, layer: u32, kind: TensorKind, m: &F32Matrix) {
    put_block(out, layer, kind, m.rows, m.cols);
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a bundle without checking its invariants (shapes must agree).
pub fn encode(bundle: &CaptureBundle) -> Result<Vec<u8>, FormatError> {
    let meta = Metadata {
        model_id: bundle.model_id.clone(),
        logits_tolerance: bundle.logits_tolerance,
        shared_experts: bundle.shared_experts,
        sequences: bundle.sequences.clone(),
        layers: bundle.layers.iter().map(layer_meta).collect::<Result<_, _>>()?,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| FormatError::Unencodable(e.to_string()))?;
    let mut out = Vec::with_capacity(expected_len(json.len(), &meta.layers));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&bundle.format_version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for l in &bundle.layers {
        let idx = l.layer_index;
        put_f32(&mut out, idx, TensorKind::Hidden, &l.hidden_states);
        put_f32(&mut out, idx, TensorKind::Router, &l.router.weights);
        if let Some(g) = &l.logits {
            put_f32(&mut out, idx, TensorKind::Logits, g);
        }
        if let Some(u) = &l.usage {
            put_block(&mut out, idx, TensorKind::Masks, u.masks.rows, u.masks.cols);
            out.extend_from_slice(&u.masks.bits);
            put_f32(&mut out, idx, TensorKind::Weights, &u.weights);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Serialises a bundle after checking every invariant.
pub fn write_capture<W: Write>(bundle: &CaptureBundle, mut sink: W) -> Result<u64, FormatError> {
    let violations = bundle.violations();
    if !violations.is_empty() {
        return Err(FormatError::Validation(violations));
    }
    let bytes = encode(bundle)?;
    sink.write_all(&bytes)?;
    Ok(bytes.len() as u64)
}

fn expected_len(json_len: usize, layers: &[LayerMeta]) -> usize {
    let blocks: usize = layers
        .iter()
        .flat_map(LayerMeta::blocks)
        .map(|(kind, r, c)| BLOCK_HEADER + r * c * kind.elem_size())
        .sum();
    PREAMBLE + json_len + blocks + CRC_LEN
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn stored_crc(bytes: &[u8]) -> (u32, u32) {
    let body = bytes.len() - CRC_LEN;
    (u32_at(bytes, body), crc32fast::hash(&bytes[..body]))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn block(&mut self, layer: u32, kind: TensorKind, rows: usize, cols: usize) -> Result<&[u8], FormatError> {
        let at = self.pos;
        let structure = |message: String| FormatError::Structure {
            offset: at as u64,
            message,
        };
        let got_layer = u32_at(self.bytes, at);
        let tag = self.bytes[at + 4];
        let (r, c) = (u64_at(self.bytes, at + 5), u64_at(self.bytes, at + 13));
        if got_layer != layer {
            return Err(structure(format!("block for layer {got_layer}, expected layer {layer}")));
        }
        match TensorKind::from_tag(tag) {
            Some(k) if k == kind => {}
            Some(k) => return Err(structure(format!("tensor kind {k:?}, expected {kind:?}"))),
            None => return Err(structure(format!("unknown tensor kind tag {tag}"))),
        }
        if (r, c) != (rows as u64, cols as u64) {
            return Err(structure(format!("{kind:?} is {r}x{c}, metadata says {rows}x{cols}")));
        }
        let start = at + BLOCK_HEADER;
        let end = start + rows * cols * kind.elem_size();
        self.pos = end;
        Ok(&self.bytes[start..end])
    }

    fn f32_block(&mut self, layer: u32, kind: TensorKind, rows: usize, cols: usize) -> Result<F32Matrix, FormatError> {
        let payload = self.block(layer, kind, rows, cols)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(F32Matrix { rows, cols, data })
    }
}

/// Parses a capture and checks container integrity, without the bundle invariants.
pub fn decode_unchecked(bytes: &[u8]) -> Result<CaptureBundle, FormatError> {
    let n = bytes.len();
    let head = &bytes[..n.min(4)];
    if head != &MAGIC[..head.len()] {
        return Err(FormatError::BadMagic { found: head.to_vec() });
    }
    if n < PREAMBLE + CRC_LEN {
        return Err(FormatError::Truncated {
            available: n as u64,
            expected: (PREAMBLE + CRC_LEN) as u64,
        });
    }
    let version = u32_at(bytes, 4);
    let json_len = u64_at(bytes, 8);
    let json_end = (PREAMBLE as u64).saturating_add(json_len);
    if json_end.saturating_add(CRC_LEN as u64) > n as u64 {
        return Err(FormatError::Truncated {
            available: n as u64,
            expected: json_end.saturating_add(CRC_LEN as u64),
        });
    }
    let json_end = json_end as usize;
    let (stored, computed) = stored_crc(bytes);
    let meta: Metadata = match serde_json::from_slice(&bytes[PREAMBLE..json_end]) {
        Ok(m) => m,
        // a damaged file can corrupt the metadata itself
        Err(_) if stored != computed => return Err(FormatError::ChecksumMismatch { stored, computed }),
        Err(e) => return Err(FormatError::Metadata(e.to_string())),
    };
    let expected = expected_len(json_end - PREAMBLE, &meta.layers);
    if n < expected {
        return Err(FormatError::Truncated {
            available: n as u64,
            expected: expected as u64,
        });
    }
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    if n > expected {
        return Err(FormatError::Structure {
            offset: (expected - CRC_LEN) as u64,
            message: format!("{} unexpected trailing bytes", n - expected),
        });
    }
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }

    let mut cur = Cursor { bytes, pos: json_end };
    let mut layers = Vec::with_capacity(meta.layers.len());
    for lm in &meta.layers {
        let idx = lm.layer_index;
        let hidden_states = cur.f32_block(idx, TensorKind::Hidden, lm.tokens, lm.hidden_dim)?;
        let weights = cur.f32_block(idx, TensorKind::Router, lm.experts, lm.hidden_dim)?;
        let logits = if lm.has_logits {
            Some(cur.f32_block(idx, TensorKind::Logits, lm.tokens, lm.experts)?)
        } else {
            None
        };
        let usage = match lm.usage_top_k {
            Some(top_k) => {
                let bits = cur.block(idx, TensorKind::Masks, lm.tokens, lm.experts)?.to_vec();
                let w = cur.f32_block(idx, TensorKind::Weights, lm.tokens, lm.experts)?;
                Some(ExpertUsage {
                    top_k,
                    masks: MaskMatrix {
                        rows: lm.tokens,
                        cols: lm.experts,
                        bits,
                    },
                    weights: w,
                })
            }
            None => None,
        };
        layers.push(LayerRecord {
            layer_index: idx,
            hidden_states,
            router: RouterSpec {
                weights,
                top_k: lm.top_k,
                gate: lm.gate,
                tie_rule: lm.tie_rule,
            },
            usage,
            logits,
        });
    }
    Ok(CaptureBundle {
        format_version: version,
        model_id: meta.model_id,
        logits_tolerance: meta.logits_tolerance,
        shared_experts: meta.shared_experts,
        layers,
        sequences: meta.sequences,
    })
}

/// Parses a capture and checks every bundle invariant.
pub fn decode(bytes: &[u8]) -> Result<CaptureBundle, FormatError> {
    let bundle = decode_unchecked(bytes)?;
    let violations = bundle.violations();
    if violations.is_empty() {
        Ok(bundle)
    } else {
        Err(FormatError::Validation(violations))
    }
}

pub fn read_capture<R: Read>(mut source: R) -> Result<CaptureBundle, FormatError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn read_capture_file(path: impl AsRef<Path>) -> Result<CaptureBundle, FormatError> {
    decode(&fs::read(path)?)
}

pub fn write_capture_file(bundle: &CaptureBundle, path: impl AsRef<Path>) -> Result<u64, FormatError> {
    let mut buf = Vec::new();
    let n = write_capture(bundle, &mut buf)?;
    fs::write(path, buf)?;
    Ok(n)
}
