//! Capture-level perturbations.
//!
//! Real OOD and duplication inputs come from re-running a model on edited
//! text. These functions apply the closest hidden-state analogues directly to
//! a bundle so the studies can run without a model.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::balance::gaussian_matrix;
use crate::capture::{CaptureBundle, ExpertUsage, F32Matrix, LayerRecord, MaskMatrix};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::spectral::{projector, svd};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PerturbationKind {
    ReverseTokens,
    ShuffleTokens,
    /// Each sequence is repeated `factor` times back to back.
    Duplicate(usize),
    /// Rotates the router row-space component of every hidden state towards
    /// an orthogonal subspace; `1.0` is a quarter turn (fully out of the
    /// row space).
    SubspaceRotation(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn apply(&self, bundle: &CaptureBundle) -> Result<CaptureBundle> {
        match self.kind {
            PerturbationKind::ReverseTokens => Ok(reorder(bundle, |span, _| span.rev().collect(), 1)),
            PerturbationKind::ShuffleTokens => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok(reorder(
                    bundle,
                    |span, _| {
                        let mut idx: Vec<usize> = span.collect();
                        idx.shuffle(&mut rng);
                        idx
                    },
                    1,
                ))
            }
            PerturbationKind::Duplicate(factor) => {
                if factor == 0 {
                    return Err(Error::InvalidParameter {
                        what: "duplication factor",
                        reason: "must be at least 1".into(),
                    });
                }
                Ok(reorder(
                    bundle,
                    |span, f| (0..f).flat_map(|_| span.clone()).collect(),
                    factor,
                ))
            }
            PerturbationKind::SubspaceRotation(fraction) => {
                if !fraction.is_finite() {
                    return Err(Error::NonFinite { what: "rotation fraction" });
                }
                let mut out = bundle.clone();
                for layer in &mut out.layers {
                    rotate_layer(layer, fraction, self.seed ^ u64::from(layer.layer_index))?;
                }
                Ok(out)
            }
        }
    }
}

/// Rebuilds every layer with per-sequence token orders given by `order`;
/// each sequence grows by `factor`.
fn reorder(
    bundle: &CaptureBundle,
    mut order: impl FnMut(core::ops::Range<usize>, usize) -> Vec<usize>,
    factor: usize,
) -> CaptureBundle {
    let mut rows = Vec::with_capacity(bundle.total_tokens() * factor);
    let mut sequences = Vec::with_capacity(bundle.sequences.len());
    for s in &bundle.sequences {
        let start = rows.len();
        rows.extend(order(s.span(), factor));
        let mut meta = s.clone();
        meta.start = start;
        meta.end = rows.len();
        meta.prompt_boundary = s.prompt_boundary.map(|b| b - s.start + start);
        sequences.push(meta);
    }
    let layers = bundle.layers.iter().map(|l| permute_layer(l, &rows)).collect();
    CaptureBundle {
        layers,
        sequences,
        ..bundle.clone()
    }
}

fn gather_f32(m: &F32Matrix, rows: &[usize]) -> F32Matrix {
    let mut data = Vec::with_capacity(rows.len() * m.cols);
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    F32Matrix {
        rows: rows.len(),
        cols: m.cols,
        data,
    }
}

/// Selects (and possibly repeats) token rows of a layer.
pub fn permute_layer(layer: &LayerRecord, rows: &[usize]) -> LayerRecord {
    let usage = layer.usage.as_ref().map(|u| {
        let mut bits = Vec::with_capacity(rows.len() * u.masks.cols);
        for &r in rows {
            bits.extend_from_slice(u.masks.row(r));
        }
        ExpertUsage {
            top_k: u.top_k,
            masks: MaskMatrix {
                rows: rows.len(),
                cols: u.masks.cols,
                bits,
            },
            weights: gather_f32(&u.weights, rows),
        }
    });
    LayerRecord {
        layer_index: layer.layer_index,
        hidden_states: gather_f32(&layer.hidden_states, rows),
        router: layer.router.clone(),
        usage,
        logits: layer.logits.as_ref().map(|g| gather_f32(g, rows)),
    }
}

/// `count` orthonormal rows orthogonal to the orthonormal rows of `basis`,
/// from seeded gaussian draws.
pub fn complement_basis(basis: &Matrix, count: usize, seed: u64) -> Result<Matrix> {
    let d = basis.cols();
    if basis.rows() + count > d {
        return Err(Error::InvalidParameter {
            what: "complement basis",
            reason: alloc::format!("{} + {count} directions do not fit in dimension {d}", basis.rows()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian_matrix(&mut rng, 1, d, 1.0).into_data();
        // two Gram-Schmidt passes keep orthogonality at rounding level
        for _ in 0..2 {
            for q in (0..basis.rows()).map(|i| basis.row(i)).chain(out.iter().map(|r| &r[..])) {
                let c = dot(&v, q);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let n = norm2(&v);
        if n > 1e-8 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    if out.is_empty() {
        return Ok(Matrix::zeros(0, d));
    }
    Matrix::from_rows(&out)
}

/// Orthonormal basis of the router row space and a same-sized orthogonal partner.
pub fn router_planes(router: &Matrix, seed: u64) -> Result<(Matrix, Matrix)> {
    let summary = svd(router)?;
    let rows = projector(&summary, summary.rank())?.basis_rows().clone();
    let partner = complement_basis(&rows, rows.rows(), seed)?;
    Ok((rows, partner))
}

/// Rotates `h` by `fraction · π/2` in each plane spanned by a row-space
/// direction and its partner.
pub fn rotate_out_of_row_space(h: &[f64], rows: &Matrix, partner: &Matrix, fraction: f64) -> Vec<f64> {
    let theta = fraction * core::f64::consts::FRAC_PI_2;
    let (c, s) = (libm::cos(theta), libm::sin(theta));
    let mut out = h.to_vec();
    for i in 0..rows.rows() {
        let (u, w) = (rows.row(i), partner.row(i));
        let a = dot(h, u);
        let b = dot(h, w);
        let (da, db) = (c * a - s * b - a, s * a + c * b - b);
        for ((o, ui), wi) in out.iter_mut().zip(u).zip(w) {
            *o += da * ui + db * wi;
        }
    }
    out
}

fn rotate_layer(layer: &mut LayerRecord, fraction: f64, seed: u64) -> Result<()> {
    let router = layer.router.weights_f64();
    let (rows, partner) = router_planes(&router, seed)?;
    let h = layer.hidden_f64();
    let mut rotated = Matrix::zeros(h.rows(), h.cols());
    for t in 0..h.rows() {
        let r = rotate_out_of_row_space(h.row(t), &rows, &partner, fraction);
        rotated.row_mut(t).copy_from_slice(&r);
    }
    layer.hidden_states = F32Matrix::from_f64(&rotated);
    if layer.logits.is_some() {
        layer.logits = Some(F32Matrix::from_f64(&layer.computed_logits()));
    }
    if layer.usage.is_some() {
        layer.usage = Some(crate::capture::derive_usage(layer));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_bundle, SynthConfig};
    use alloc::vec;

    fn bundle() -> CaptureBundle {
        synth_bundle(&SynthConfig {
            sequences: 3,
            seq_len: 5,
            layers: 2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn reverse_twice_is_identity() {
        let b = bundle();
        let spec = PerturbationSpec::new(PerturbationKind::ReverseTokens, 0);
        let once = spec.apply(&b).unwrap();
        assert_ne!(once.layers[0].hidden_states, b.layers[0].hidden_states);
        assert_eq!(spec.apply(&once).unwrap(), b);
        once.validate().unwrap();
    }

    #[test]
    fn shuffle_is_seeded_and_valid() {
        let b = bundle();
        let s1 = PerturbationSpec::new(PerturbationKind::ShuffleTokens, 4).apply(&b).unwrap();
        let s2 = PerturbationSpec::new(PerturbationKind::ShuffleTokens, 4).apply(&b).unwrap();
        assert_eq!(s1, s2);
        s1.validate().unwrap();
    }

    #[test]
    fn duplication_repeats_spans() {
        let b = bundle();
        let d = PerturbationSpec::new(PerturbationKind::Duplicate(3), 0).apply(&b).unwrap();
        d.validate().unwrap();
        assert_eq!(d.total_tokens(), 3 * b.total_tokens());
        let s = &d.sequences[1];
        assert_eq!(s.len(), 15);
        let h = &d.layers[0].hidden_states;
        assert_eq!(h.row(s.start), h.row(s.start + 5));
        assert_eq!(h.row(s.start + 4), b.layers[0].hidden_states.row(b.sequences[1].start + 4));
        assert!(PerturbationSpec::new(PerturbationKind::Duplicate(0), 0).apply(&b).is_err());
    }

    #[test]
    fn quarter_turn_leaves_row_space() {
        let p = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let (rows, partner) = router_planes(&p, 2).unwrap();
        let h = [0.3, -0.7, 0.0, 0.0];
        let r = rotate_out_of_row_space(&h, &rows, &partner, 1.0);
        assert!(p.mul_vec(&r).iter().all(|v| v.abs() < 1e-12));
        assert!((norm2(&r) - norm2(&h)).abs() < 1e-12);
        let zero = rotate_out_of_row_space(&h, &rows, &partner, 0.0);
        assert!(zero.iter().zip(&h).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn rotation_needs_room() {
        let p = Matrix::identity(3);
        assert!(router_planes(&p, 0).is_err());
    }
}
