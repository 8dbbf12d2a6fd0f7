//! Seeded synthetic captures.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::balance::gaussian_matrix;
use crate::capture::{
    derive_usage, CaptureBundle, F32Matrix, Gate, LayerRecord, RouterSpec, SequenceMeta, DEFAULT_LOGITS_TOLERANCE,
    FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix};
use crate::spectral::TieRule;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SynthData {
    /// `h = μ + ξ` with a random `μ` of norm `mu_norm` per layer and
    /// `ξ ~ N(0, noise² I)`.
    Correlated { mu_norm: f64, noise: f64 },
    /// `h = C G + ξ` with `rank` latent gaussian factors.
    LowRank { rank: usize, noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthConfig {
    pub seed: u64,
    pub model_id: alloc::string::String,
    pub layers: usize,
    pub sequences: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub gate: Gate,
    pub data: SynthData,
    /// Router entries are `N(0, router_scale² / D)`.
    pub router_scale: f64,
    pub with_logits: bool,
    pub with_usage: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model_id: "synthetic".into(),
            layers: 2,
            sequences: 4,
            seq_len: 16,
            hidden_dim: 16,
            experts: 8,
            top_k: 2,
            gate: Gate::Softmax,
            data: SynthData::Correlated { mu_norm: 1.0, noise: 0.5 },
            router_scale: 1.0,
            with_logits: true,
            with_usage: true,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("sequences", self.sequences),
            ("seq_len", self.seq_len),
            ("hidden_dim", self.hidden_dim),
            ("experts", self.experts),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter {
                    what: "synth dims",
                    reason: format!("{what} must be positive"),
                });
            }
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::OutOfRange {
                what: "synth top_k",
                value: self.top_k,
                min: 1,
                max: self.experts,
            });
        }
        let (noise, scale_ok) = match self.data {
            SynthData::Correlated { mu_norm, noise } => (noise, mu_norm.is_finite() && mu_norm >= 0.0),
            SynthData::LowRank { rank, noise } => (noise, rank >= 1 && rank <= self.hidden_dim),
        };
        if !(noise.is_finite() && noise >= 0.0 && scale_ok && self.router_scale.is_finite()) {
            return Err(Error::InvalidParameter {
                what: "synth data",
                reason: format!("{:?}", self.data),
            });
        }
        Ok(())
    }
}

/// Labels for sequence `i`: cycles questions fastest, then models, then seeds.
pub fn labels_for(i: usize) -> BTreeMap<alloc::string::String, alloc::string::String> {
    let mut m = BTreeMap::new();
    m.insert("question".into(), format!("q{}", i % 3));
    m.insert("model".into(), format!("m{}", (i / 3) % 2));
    m.insert("seed".into(), format!("s{}", i / 6));
    m.insert("domain".into(), format!("d{}", i % 2));
    m
}

fn hidden_states(rng: &mut ChaCha8Rng, t: usize, d: usize, data: SynthData) -> Matrix {
    match data {
        SynthData::Correlated { mu_norm, noise } => {
            let dir = gaussian_matrix(rng, 1, d, 1.0).into_data();
            let n = norm2(&dir);
            let mu: Vec<f64> = dir.iter().map(|v| v * mu_norm / n).collect();
            let xi = gaussian_matrix(rng, t, d, noise);
            Matrix::from_fn(t, d, |i, j| mu[j] + xi.get(i, j))
        }
        SynthData::LowRank { rank, noise } => {
            let c = gaussian_matrix(rng, t, rank, 1.0);
            let g = gaussian_matrix(rng, rank, d, 1.0 / libm::sqrt(d as f64));
            let xi = gaussian_matrix(rng, t, d, noise);
            c.matmul(&g).expect("inner dims agree").add(&xi).expect("same shape")
        }
    }
}

pub fn synth_bundle(config: &SynthConfig) -> Result<CaptureBundle> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let t = config.sequences * config.seq_len;
    let d = config.hidden_dim;
    let mut layers = Vec::with_capacity(config.layers);
    for idx in 0..config.layers {
        let router = gaussian_matrix(&mut rng, config.experts, d, config.router_scale / libm::sqrt(d as f64));
        let h = hidden_states(&mut rng, t, d, config.data);
        let mut layer = LayerRecord {
            layer_index: idx as u32,
            hidden_states: F32Matrix::from_f64(&h),
            router: RouterSpec {
                weights: F32Matrix::from_f64(&router),
                top_k: config.top_k,
                gate: config.gate,
                tie_rule: TieRule::LowestIndex,
            },
            usage: None,
            logits: None,
        };
        if config.with_logits {
            layer.logits = Some(F32Matrix::from_f64(&layer.computed_logits()));
        }
        if config.with_usage {
            layer.usage = Some(derive_usage(&layer));
        }
        layers.push(layer);
    }
    let sequences = (0..config.sequences)
        .map(|i| {
            let start = i * config.seq_len;
            SequenceMeta {
                sequence_id: format!("seq-{i}"),
                start,
                end: start + config.seq_len,
                prompt_boundary: Some(start + config.seq_len / 2),
                labels: labels_for(i),
            }
        })
        .collect();
    Ok(CaptureBundle {
        format_version: FORMAT_VERSION,
        model_id: config.model_id.clone(),
        logits_tolerance: DEFAULT_LOGITS_TOLERANCE,
        shared_experts: 0,
        layers,
        sequences,
    })
}
