//! Dense complex matrices and the small-matrix numerical kernels the crate
//! relies on: complex Jacobi Hermitian eigendecomposition and one-sided
//! Jacobi (Hestenes) SVD.
//!
//! Everything here targets matrices up to a few thousand on a side, which is
//! the regime of cell algebras, union supports and finite windows. Jacobi
//! methods are chosen deliberately: they are simple, deterministic (fixed
//! sweep order), no_std-friendly, and deliver high relative accuracy in the
//! singular values — which matters because rank decisions downstream use
//! absolute thresholds like 1e-8 on unit-scaled data.

use alloc::vec;
use alloc::vec::Vec;
use num_complex::Complex64;

// Required for f64 math in no_std builds; redundant (and reported unused)
// whenever a dependency links std and the inherent methods take over.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Dense row-major complex matrix.
#[derive(Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl core::fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "CMatrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 36 {
            for i in 0..self.rows {
                write!(f, "\n  [")?;
                for j in 0..self.cols {
                    let z = self[(i, j)];
                    write!(f, " {:+.3e}{:+.3e}i", z.re, z.im)?;
                }
                write!(f, " ]")?;
            }
        }
        Ok(())
    }
}

impl core::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = CMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Build from a row-major slice of (re, im) pairs; length must match.
    pub fn from_rows(rows: usize, cols: usize, entries: &[Complex64]) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::invalid("matrix entry count does not match shape"));
        }
        Ok(CMatrix {
            rows,
            cols,
            data: entries.to_vec(),
        })
    }

    /// Matrix unit e_ij (1 at (i, j), 0 elsewhere) of size n×n.
    pub fn matrix_unit(n: usize, i: usize, j: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        m[(i, j)] = ONE;
        m
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn ncols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
    #[inline]
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }
    #[inline]
    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn adjoint(&self) -> CMatrix {
        let mut out = CMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn conj(&self) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, a: Complex64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * a).collect(),
        }
    }

    pub fn add(&self, other: &CMatrix) -> CMatrix {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &CMatrix) -> CMatrix {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// self += a * other, in place.
    pub fn axpy(&mut self, a: Complex64, other: &CMatrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn mul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = CMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == ZERO {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let crow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (c, b) in crow.iter_mut().zip(orow) {
                    *c += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        let mut out = vec![ZERO; self.rows];
        for i in 0..self.rows {
            let mut acc = ZERO;
            for (a, x) in self.row(i).iter().zip(v) {
                acc += a * x;
            }
            out[i] = acc;
        }
        out
    }

    /// Kronecker product; the left factor is the most significant index:
    /// (A ⊗ B)[(i1*rB + i2), (j1*cB + j2)] = A[i1,j1] * B[i2,j2].
    pub fn kron(&self, other: &CMatrix) -> CMatrix {
        let (ra, ca) = (self.rows, self.cols);
        let (rb, cb) = (other.rows, other.cols);
        let mut out = CMatrix::zeros(ra * rb, ca * cb);
        for i1 in 0..ra {
            for j1 in 0..ca {
                let a = self[(i1, j1)];
                if a == ZERO {
                    continue;
                }
                for i2 in 0..rb {
                    for j2 in 0..cb {
                        out[(i1 * rb + i2, j1 * cb + j2)] = a * other[(i2, j2)];
                    }
                }
            }
        }
        out
    }

    pub fn trace(&self) -> Complex64 {
        debug_assert!(self.is_square());
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// tr(self† · other), computed elementwise.
    pub fn hs_dot(&self, other: &CMatrix) -> Complex64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// ‖self† · self − I‖_max; zero iff the columns are orthonormal.
    pub fn unitarity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for p in 0..self.cols {
            for q in p..self.cols {
                let mut acc = ZERO;
                for i in 0..self.rows {
                    acc += self[(i, p)].conj() * self[(i, q)];
                }
                if p == q {
                    acc -= ONE;
                }
                worst = worst.max(acc.norm());
            }
        }
        worst
    }

    /// ‖self − self†‖_max.
    pub fn hermiticity_defect(&self) -> f64 {
        debug_assert!(self.is_square());
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i..self.rows {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[Complex64]) {
        debug_assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }
}

/// The 2×2 unitary that diagonalizes a Hermitian pair (app, aqq real, apq
/// complex), returned as (c, s, u) with the convention
///   U = [[c, -s·u*], [s·u ... ]]
/// materialized by the callers below; c ≥ 0 and s are real, u = e^{-iφ} where
/// φ = arg(apq).
#[inline]
fn jacobi_rotation(app: f64, aqq: f64, apq: Complex64) -> (f64, f64, Complex64) {
    let babs = apq.norm();
    // u = e^{-iφ}: the phase that makes the off-diagonal real positive.
    let u = (apq / babs).conj();
    let tau = (aqq - app) / (2.0 * babs);
    let s0 = if tau >= 0.0 { 1.0 } else { -1.0 };
    let t = -s0 / (tau.abs() + (1.0 + tau * tau).sqrt());
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    (c, s, u)
}

impl CMatrix {
    /// Eigendecomposition of a Hermitian matrix by cyclic complex Jacobi.
    ///
    /// Returns (eigenvalues ascending, Q with eigenvector columns in the same
    /// order), satisfying self ≈ Q · diag(λ) · Q†. The input is symmetrized
    /// (its Hermitian part is used); callers should check
    /// [`CMatrix::hermiticity_defect`] if that matters.
    pub fn hermitian_eigen(&self) -> (Vec<f64>, CMatrix) {
        assert!(self.is_square(), "hermitian_eigen needs a square matrix");
        let n = self.rows;
        // Work on the Hermitian part to wash out representation noise.
        let mut a = CMatrix::from_fn(n, n, |i, j| (self[(i, j)] + self[(j, i)].conj()) * 0.5);
        let mut q = CMatrix::identity(n);
        if n > 1 {
            let scale = a.frob_norm().max(1e-300);
            let stop = 1e-15 * scale;
            for _sweep in 0..60 {
                let mut off: f64 = 0.0;
                for p in 0..n - 1 {
                    for qq in p + 1..n {
                        off = off.max(a[(p, qq)].norm());
                    }
                }
                if off <= stop {
                    break;
                }
                for p in 0..n - 1 {
                    for qq in p + 1..n {
                        let apq = a[(p, qq)];
                        if apq.norm() <= stop * 1e-2 {
                            continue;
                        }
                        let (c, s, u) = jacobi_rotation(a[(p, p)].re, a[(qq, qq)].re, apq);
                        // Column update: A←A·U, with U = [[c, -s],[s·u, c·u]]
                        // acting on columns (p, qq).
                        let (cs, ss) = (Complex64::new(c, 0.0), Complex64::new(s, 0.0));
                        for i in 0..n {
                            let x = a[(i, p)];
                            let y = a[(i, qq)];
                            a[(i, p)] = x * cs + y * (ss * u);
                            a[(i, qq)] = -x * ss + y * (cs * u);
                        }
                        // Row update: A←U†·A.
                        for j in 0..n {
                            let x = a[(p, j)];
                            let y = a[(qq, j)];
                            a[(p, j)] = x * cs + y * (ss * u).conj();
                            a[(qq, j)] = -x * ss + y * (cs * u).conj();
                        }
                        // Accumulate eigenvectors: Q←Q·U.
                        for i in 0..n {
                            let x = q[(i, p)];
                            let y = q[(i, qq)];
                            q[(i, p)] = x * cs + y * (ss * u);
                            q[(i, qq)] = -x * ss + y * (cs * u);
                        }
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        let evs: Vec<f64> = (0..n).map(|i| a[(i, i)].re).collect();
        order.sort_by(|&i, &j| evs[i].partial_cmp(&evs[j]).unwrap());
        let vals: Vec<f64> = order.iter().map(|&i| evs[i]).collect();
        let vecs = CMatrix::from_fn(n, n, |i, j| q[(i, order[j])]);
        (vals, vecs)
    }

    /// Thin SVD by one-sided Jacobi: self = U · diag(σ) · V†, σ descending.
    ///
    /// U is rows×k and V is cols×k with k = min(rows, cols). Columns of U
    /// belonging to zero singular values are zero vectors (no orthonormal
    /// completion is performed); callers that need a basis use only the
    /// columns with σ above their threshold.
    pub fn svd(&self) -> (CMatrix, Vec<f64>, CMatrix) {
        if self.rows < self.cols {
            let (u, s, v) = self.adjoint().svd();
            return (v, s, u);
        }
        let (m, n) = (self.rows, self.cols);
        let mut w = self.clone();
        let mut v = CMatrix::identity(n);
        let eps = 1e-15;
        for _sweep in 0..60 {
            let mut rotated = false;
            for p in 0..n.saturating_sub(1) {
                for q in p + 1..n {
                    let mut alpha = 0.0f64;
                    let mut beta = 0.0f64;
                    let mut gamma = ZERO;
                    for i in 0..m {
                        let x = w[(i, p)];
                        let y = w[(i, q)];
                        alpha += x.norm_sqr();
                        beta += y.norm_sqr();
                        gamma += x.conj() * y;
                    }
                    if alpha <= 1e-300 || beta <= 1e-300 {
                        continue;
                    }
                    if gamma.norm() <= eps * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let (c, s, u) = jacobi_rotation(alpha, beta, gamma);
                    let (cs, ss) = (Complex64::new(c, 0.0), Complex64::new(s, 0.0));
                    for i in 0..m {
                        let x = w[(i, p)];
                        let y = w[(i, q)];
                        w[(i, p)] = x * cs + y * (ss * u);
                        w[(i, q)] = -x * ss + y * (cs * u);
                    }
                    for i in 0..n {
                        let x = v[(i, p)];
                        let y = v[(i, q)];
                        v[(i, p)] = x * cs + y * (ss * u);
                        v[(i, q)] = -x * ss + y * (cs * u);
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        // Column norms are the singular values; sort descending.
        let mut sig: Vec<f64> = (0..n)
            .map(|j| {
                (0..m)
                    .map(|i| w[(i, j)].norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| sig[j].partial_cmp(&sig[i]).unwrap());
        let mut u_out = CMatrix::zeros(m, n);
        let mut v_out = CMatrix::zeros(n, n);
        let mut s_out = Vec::with_capacity(n);
        for (newj, &oldj) in order.iter().enumerate() {
            let s = sig[oldj];
            s_out.push(s);
            if s > 0.0 {
                for i in 0..m {
                    u_out[(i, newj)] = w[(i, oldj)] / s;
                }
            }
            for i in 0..n {
                v_out[(i, newj)] = v[(i, oldj)];
            }
        }
        sig.clear();
        (u_out, s_out, v_out)
    }

    /// Number of singular values strictly above `tol` (absolute threshold).
    pub fn rank(&self, tol: f64) -> usize {
        let (_, s, _) = self.svd();
        s.iter().filter(|&&x| x > tol).count()
    }
}
