//! Symmetric positive-definite matrix utilities: Cholesky factorization,
//! stabilized conditioning, shrinkage, and SPD projection.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A symmetric matrix that has passed a Cholesky factorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    /// Symmetrizes `m` and verifies positive definiteness.
    pub fn new(mut m: Matrix) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "SPD matrix must be square and non-empty, got {:?}",
                m.shape()
            )));
        }
        m.symmetrize();
        cholesky(&m)?;
        Ok(Self(m))
    }

    pub fn identity(p: usize) -> Self {
        Self(Matrix::identity(p))
    }

    /// Wraps a matrix the caller has already factorized.
    pub(crate) fn new_unchecked(m: Matrix) -> Self {
        debug_assert!(m.is_symmetric());
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        cholesky(&self.0)
    }

    /// `c · self` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        debug_assert!(c > 0.0);
        Self(self.0.scale(c))
    }
}

impl Deref for SpdMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Lower-triangular `L` with `L Lᵀ = A`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    lower: Matrix,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul(&self.lower.transpose())
    }

    /// Solves `L y = b` in place.
    pub fn forward_solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let row = self.lower.row(i);
            let mut s = b[i];
            for k in 0..i {
                s -= row[k] * b[k];
            }
            b[i] = s / row[i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_solve_in_place(&self, y: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(y.len(), n);
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.lower[(k, i)] * y[k];
            }
            y[i] = s / self.lower[(i, i)];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_solve_in_place(&mut x);
        self.backward_solve_in_place(&mut x);
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.nrows(), self.dim());
        let mut out = Matrix::zeros(b.nrows(), b.ncols());
        let mut col = vec![0.0; b.nrows()];
        for j in 0..b.ncols() {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b[(i, j)];
            }
            self.forward_solve_in_place(&mut col);
            self.backward_solve_in_place(&mut col);
            out.set_col(j, &col);
        }
        out
    }

    /// `A⁻¹` assembled from triangular solves.
    pub fn inverse(&self) -> Matrix {
        let mut inv = self.solve_matrix(&Matrix::identity(self.dim()));
        inv.symmetrize();
        inv
    }

    /// `L z`.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| self.lower.row(i)[..=i].iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Cholesky factorization of a symmetric matrix; only the lower triangle is read.
pub fn cholesky(a: &Matrix) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(alloc::format!("cholesky needs a square matrix, got {:?}", a.shape())));
    }
    let n = a.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            let (ri, rj) = (l.row(i), l.row(j));
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(CholeskyFactor { lower: l })
}

/// `A + (eps · tr(A)/p) I`.
pub fn jitter(a: &Matrix, eps: f64) -> Result<SpdMatrix> {
    let p = a.nrows() as f64;
    let tr = a.trace();
    if !(tr > 0.0) {
        return Err(Error::NonPositiveTrace(tr));
    }
    SpdMatrix::new(a.add_diag(eps * tr / p))
}

/// Linear shrinkage `(1−γ) S + γ (tr(S)/p) I`.
pub fn shrink_covariance(s: &Matrix, gamma: f64) -> Result<SpdMatrix> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    let tr = s.trace();
    if gamma > 0.0 && !(tr > 0.0) {
        return Err(Error::NonPositiveTrace(tr));
    }
    let target = gamma * tr / s.nrows() as f64;
    SpdMatrix::new(s.scale(1.0 - gamma).add_diag(target))
}

/// `S + τ I`.
pub fn ridge_covariance(s: &Matrix, tau: f64) -> Result<SpdMatrix> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTau(tau));
    }
    SpdMatrix::new(s.add_diag(tau))
}

/// Eigenvalue floor used by [`nearest_spd`]: `max(1e-8, 1e-8 · λ_max)`.
pub fn spd_floor(lambda_max: f64) -> f64 {
    f64::max(1e-8, 1e-8 * lambda_max)
}

/// Projects a symmetric matrix onto the SPD cone by clamping eigenvalues at
/// [`spd_floor`]. Inputs whose spectrum already clears the floor come back
/// unchanged (after symmetrization).
pub fn nearest_spd(a: &Matrix) -> SpdMatrix {
    let mut sym = a.clone();
    sym.symmetrize();
    let eig = symmetric_eigen(&sym);
    let lmax = eig.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = spd_floor(lmax);
    if eig.values.iter().all(|&v| v >= floor) && cholesky(&sym).is_ok() {
        return SpdMatrix::new_unchecked(sym);
    }
    let clamped: Vec<f64> = eig.values.iter().map(|&v| v.max(floor)).collect();
    let mut out = eig.reassemble(&clamped);
    out.symmetrize();
    // Reassembly roundoff can leave a pivot marginally non-positive when the
    // spread of the spectrum is close to 1/eps; nudge the diagonal until it factors.
    let mut bump = floor;
    while cholesky(&out).is_err() {
        out = out.add_diag(bump);
        bump *= 10.0;
    }
    SpdMatrix::new_unchecked(out)
}

/// Symmetric eigendecomposition `A = V diag(λ) Vᵀ`.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns, matching `values`.
    pub vectors: Matrix,
}

impl SymmetricEigen {
    pub fn reassemble(&self, values: &[f64]) -> Matrix {
        let n = values.len();
        let v = &self.vectors;
        Matrix::from_fn(n, n, |i, j| (0..n).map(|k| v[(i, k)] * values[k] * v[(j, k)]).sum())
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn symmetric_eigen(a: &Matrix) -> SymmetricEigen {
    assert!(a.is_square());
    let n = a.nrows();
    let mut m = a.clone();
    m.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..i {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    SymmetricEigen { values, vectors }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_identity_and_2x2() {
        let l = cholesky(&Matrix::identity(2)).unwrap();
        assert_eq!(l.lower(), &Matrix::identity(2));
        let l = cholesky(&Matrix::from_rows(&[[4.0, 2.0], [2.0, 5.0]])).unwrap();
        assert_eq!(l.lower(), &Matrix::from_rows(&[[2.0, 0.0], [1.0, 2.0]]));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let err = cholesky(&Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { index: 1, .. }));
        assert!(cholesky(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn jitter_examples() {
        let j = jitter(&Matrix::identity(3), 1e-2).unwrap();
        assert!(j.max_abs_diff(&Matrix::identity(3).scale(1.01)) < 1e-15);
        let j = jitter(&Matrix::from_diag(&[2.0, 0.0]), 1e-2).unwrap();
        assert!(j.max_abs_diff(&Matrix::from_diag(&[2.01, 0.01])) < 1e-15);
        assert_eq!(jitter(&Matrix::zeros(2, 2), 1e-2).unwrap_err(), Error::NonPositiveTrace(0.0));
    }

    #[test]
    fn shrink_and_ridge_examples() {
        let s = shrink_covariance(&Matrix::from_diag(&[2.0, 0.0]), 0.5).unwrap();
        assert_eq!(s.as_matrix(), &Matrix::from_diag(&[1.5, 0.5]));
        let a = Matrix::from_rows(&[[2.0, 0.3], [0.3, 1.0]]);
        assert_eq!(shrink_covariance(&a, 0.0).unwrap().as_matrix(), &a);
        assert_eq!(shrink_covariance(&a, 1.5).unwrap_err(), Error::InvalidGamma(1.5));
        assert_eq!(ridge_covariance(&Matrix::zeros(2, 2), 1.0).unwrap().as_matrix(), &Matrix::identity(2));
        let r = ridge_covariance(&Matrix::from_diag(&[1.0, 2.0]), 0.5).unwrap();
        assert_eq!(r.as_matrix(), &Matrix::from_diag(&[1.5, 2.5]));
        assert_eq!(ridge_covariance(&a, 0.0).unwrap_err(), Error::InvalidTau(0.0));
    }

    #[test]
    fn nearest_spd_clamps_negative_eigenvalue() {
        let out = nearest_spd(&Matrix::from_diag(&[1.0, -0.5]));
        let f = spd_floor(1.0);
        assert!(out.max_abs_diff(&Matrix::from_diag(&[1.0, f])) < 1e-15);
        let spd = Matrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]]);
        assert_eq!(nearest_spd(&spd).as_matrix(), &spd);
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        let e = symmetric_eigen(&a);
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 3.0).abs() < 1e-14);
        assert!(e.reassemble(&e.values).max_abs_diff(&a) < 1e-14);
    }
}
