use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

use super::SpectralSummary;

/// Orthogonal projector `Π_r = V_r V_rᵀ` onto a principal subspace.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Projector {
    /// `r x D`; row `i` is the `i`-th basis vector.
    basis_rows: Matrix,
}

impl Projector {
    /// Builds a projector from orthonormal basis vectors given as rows.
    pub fn from_basis_rows(basis_rows: Matrix) -> Self {
        Self { basis_rows }
    }

    pub fn rank(&self) -> usize {
        self.basis_rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.basis_rows.cols()
    }

    /// `V_r` as a `D x r` matrix.
    pub fn basis(&self) -> Matrix {
        self.basis_rows.transpose()
    }

    pub fn basis_rows(&self) -> &Matrix {
        &self.basis_rows
    }

    /// Coordinates `V_rᵀ x`.
    pub fn coefficients(&self, x: &[f64]) -> Vec<f64> {
        self.basis_rows.mul_vec(x)
    }

    /// `Π_r x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let c = self.coefficients(x);
        self.basis_rows.tr_mul_vec(&c)
    }

    /// `(I − Π_r) x`.
    pub fn complement(&self, x: &[f64]) -> Vec<f64> {
        let p = self.apply(x);
        x.iter().zip(&p).map(|(a, b)| a - b).collect()
    }

    /// `Π_r` as a dense `D x D` matrix.
    pub fn dense(&self) -> Matrix {
        let d = self.dim();
        let cols: Vec<Vec<f64>> = (0..d).map(|j| self.basis_rows.column(j)).collect();
        Matrix::from_fn(d, d, |i, j| dot(&cols[i], &cols[j]))
    }

    /// `M Π_r` for a matrix acting on `R^D`.
    pub fn right_multiply(&self, m: &Matrix) -> Result<Matrix> {
        m.matmul(&self.dense())
    }
}

/// Projector onto the span of the top `r` right singular vectors.
pub fn projector(summary: &SpectralSummary, r: usize) -> Result<Projector> {
    if r == 0 || r > summary.rank() {
        return Err(Error::OutOfRange {
            what: "projector rank r",
            value: r,
            min: 1,
            max: summary.rank(),
        });
    }
    let d = summary.dim();
    let rows = Matrix::from_fn(r, d, |i, j| summary.right_vector(i)[j]);
    Ok(Projector::from_basis_rows(rows))
}
