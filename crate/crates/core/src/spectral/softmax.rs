use alloc::vec::Vec;

use crate::linalg::{pairwise_sum, Matrix};

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| libm::exp(z - max)).collect();
    let total = pairwise_sum(&exps);
    exps.into_iter().map(|e| e / total).collect()
}

/// `J = diag(s) − s sᵀ` with `s = softmax(logits)`.
pub fn softmax_jacobian(logits: &[f64]) -> Matrix {
    let s = softmax(logits);
    let n = s.len();
    Matrix::from_fn(n, n, |i, j| {
        let diag = if i == j { s[i] } else { 0.0 };
        diag - s[i] * s[j]
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}
