//! Dense symmetric positive-definite linear algebra helpers.
//!
//! All positive-definiteness decisions in this crate go through [`cholesky`],
//! which declares failure as soon as a pivot drops below
//! `PIVOT_RTOL * max(diag)`. Solves use the cached triangular factor; explicit
//! inverses are only formed where a full covariance matrix is the deliverable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold: a pivot smaller than this times the largest
/// diagonal entry of the input counts as a Cholesky failure.
pub const PIVOT_RTOL: f64 = 1e-12;

/// Cached lower-triangular Cholesky factor of a symmetric PD matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Solves `A x = b` by forward then backward substitution.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    fn solve_in_place(&self, x: &mut DVector<f64>) {
        let n = self.dim();
        let l = &self.lower;
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= l[(i, k)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let mut x = DVector::from_column_slice(col.as_slice());
            self.solve_in_place(&mut x);
            col.copy_from(&x);
        }
        out
    }

    /// Explicit inverse `A^{-1}`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = self.solve_matrix(&DMatrix::identity(n, n));
        symmetrize(&mut inv);
        inv
    }

    /// `v^T A^{-1} v` through one forward substitution.
    pub fn quad_form_inv(&self, v: &DVector<f64>) -> f64 {
        let n = self.dim();
        let l = &self.lower;
        let mut z = v.clone();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= l[(i, k)] * z[k];
            }
            z[i] = s / l[(i, i)];
        }
        z.norm_squared()
    }

    /// `log det A` from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.lower[(i, i)].ln()).sum::<f64>() * 2.0
    }
}

/// Cholesky factorization with the crate-wide relative pivot threshold.
pub fn cholesky(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky requires a square matrix");
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    if !max_diag.is_finite() || max_diag <= 0.0 {
        return Err(Error::NotPositiveDefinite { index: 0, pivot: max_diag });
    }
    let threshold = PIVOT_RTOL * max_diag;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > threshold) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(CholeskyFactor { lower: l })
}

/// Replaces `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix (diagnostic use).
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let mut sym = a.clone();
    symmetrize(&mut sym);
    nalgebra::SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v))
}
