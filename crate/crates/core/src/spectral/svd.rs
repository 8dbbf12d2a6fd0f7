use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix};

/// Singular values below `s_1 * RANK_CUTOFF` count as zero.
pub const RANK_CUTOFF: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

/// Right-singular structure of a data matrix `H` (rows are samples).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpectralSummary {
    singular_values: Vec<f64>,
    /// `D x rank`, orthonormal columns.
    right_vectors: Matrix,
    /// `rank x D`, the same vectors as rows.
    right_rows: Matrix,
}

impl SpectralSummary {
    /// Descending, truncated at the numerical rank.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn right_vectors(&self) -> &Matrix {
        &self.right_vectors
    }

    /// The `i`-th right singular vector (0-based).
    pub fn right_vector(&self, i: usize) -> &[f64] {
        self.right_rows.row(i)
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn dim(&self) -> usize {
        self.right_vectors.rows()
    }

    /// Total energy `sum s_i^2` over the numerical rank.
    pub fn total_energy(&self) -> f64 {
        dot(&self.singular_values, &self.singular_values)
    }

    /// Smallest `r` whose leading energy fraction reaches `fraction`.
    pub fn rank_for_energy(&self, fraction: f64) -> usize {
        let total = self.total_energy();
        if total == 0.0 {
            return 0;
        }
        let mut acc = Vec::with_capacity(self.rank());
        for (i, s) in self.singular_values.iter().enumerate() {
            acc.push(s * s);
            if crate::linalg::pairwise_sum(&acc) / total >= fraction {
                return i + 1;
            }
        }
        self.rank()
    }
}

/// Thin SVD of an `N x D` matrix, keeping only the right singular vectors.
///
/// The matrix is first reduced to a square triangular factor with a
/// Householder QR (of `H` when `N >= D`, of `Hᵀ` otherwise), and the factor is
/// diagonalised with one-sided Jacobi rotations. Each right vector is signed
/// so that its largest-magnitude entry (lowest index on ties) is positive.
pub fn svd(h: &Matrix) -> Result<SpectralSummary> {
    if !h.is_finite() {
        return Err(Error::NonFinite { what: "svd input" });
    }
    let (n_rows, d) = (h.rows(), h.cols());
    if n_rows == 0 || d == 0 {
        return Err(Error::Empty { what: "svd input" });
    }

    // square factor whose right singular vectors we need, plus the map taking
    // them back to R^D
    let (square, lift) = if n_rows >= d {
        let (_, r) = householder_qr(h, false);
        (r, None)
    } else {
        let (q, r) = householder_qr(&h.transpose(), true);
        (r.transpose(), q)
    };

    let n = square.cols();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| square.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    one_sided_jacobi(&mut cols, &mut v);

    let sigma: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let s1 = sigma[order[0]];
    let rank = if s1 > 0.0 {
        order
            .iter()
            .take_while(|&&i| sigma[i] > s1 * RANK_CUTOFF)
            .count()
    } else {
        0
    };

    let mut singular_values = Vec::with_capacity(rank);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(rank);
    for &j in order.iter().take(rank) {
        singular_values.push(sigma[j]);
        let mut vec_d = match &lift {
            Some(q) => q.mul_vec(&v[j]),
            None => v[j].clone(),
        };
        fix_sign(&mut vec_d);
        rows.push(vec_d);
    }

    let right_rows = if rank == 0 {
        Matrix::zeros(0, d)
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(SpectralSummary {
        singular_values,
        right_vectors: right_rows.transpose(),
        right_rows,
    })
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if libm::fabs(*x) > libm::fabs(v[best]) {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Householder QR of an `m x n` matrix with `m >= n`. Returns the thin `Q`
/// (`m x n`) when requested, and the upper-triangular `R` (`n x n`).
fn householder_qr(a: &Matrix, want_q: bool) -> (Option<Matrix>, Matrix) {
    let (m, n) = (a.rows(), a.cols());
    debug_assert!(m >= n);
    let mut work = a.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);

    for k in 0..n {
        let x: Vec<f64> = (k..m).map(|i| work.get(i, k)).collect();
        let alpha = norm2(&x);
        if alpha == 0.0 {
            reflectors.push(None);
            continue;
        }
        let mut v = x;
        v[0] += if v[0] >= 0.0 { alpha } else { -alpha };
        let vn = norm2(&v);
        for e in v.iter_mut() {
            *e /= vn;
        }
        apply_reflector(&mut work, &v, k, k..n);
        reflectors.push(Some(v));
    }

    let r = Matrix::from_fn(n, n, |i, j| if j >= i { work.get(i, j) } else { 0.0 });
    let q = want_q.then(|| {
        let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
        for k in (0..n).rev() {
            if let Some(v) = &reflectors[k] {
                apply_reflector(&mut q, v, k, 0..n);
            }
        }
        q
    });
    (q, r)
}

/// `A[k.., cols] -= 2 v (vᵀ A[k.., cols])`.
fn apply_reflector(a: &mut Matrix, v: &[f64], k: usize, cols: core::ops::Range<usize>) {
    let m = a.rows();
    let mut col = vec![0.0; m - k];
    for j in cols {
        for (i, c) in col.iter_mut().enumerate() {
            *c = a.get(k + i, j);
        }
        let s = 2.0 * dot(v, &col);
        if s == 0.0 {
            continue;
        }
        for (i, vi) in v.iter().enumerate() {
            a.set(k + i, j, col[i] - s * vi);
        }
    }
}

/// Hestenes one-sided Jacobi: rotates column pairs of `cols` until they are
/// mutually orthogonal, accumulating the rotations into `v`.
fn one_sided_jacobi(cols: &mut [Vec<f64>], v: &mut [Vec<f64>]) {
    let n = cols.len();
    let tol = f64::EPSILON * n as f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if libm::fabs(gamma) <= tol * libm::sqrt(alpha) * libm::sqrt(beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + libm::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + libm::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(cols, p, q, c, s);
                rotate(v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*xp, *xq);
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}
