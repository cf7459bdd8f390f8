//! Dense complex linear algebra used throughout the simulator.
//!
//! Everything here works on Hermitian positive semi-definite matrices in
//! double precision: Cholesky factorization (with a one-shot diagonal jitter
//! retry for numerically semi-definite spatial correlation matrices),
//! Hermitian solves, correlated complex Gaussian sampling, and the column
//! pseudo-inverse used by interference-nulling precoders. No eigensolver is
//! needed or provided.

use crate::rng::standard_complex_vector;
use num_complex::Complex64;
use rand::Rng;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not Hermitian within tolerance")]
    NotHermitian,
    #[error("matrix is not positive semi-definite (Cholesky failed after jitter retry)")]
    NotPsd,
    #[error("system is numerically singular (estimated condition number {0:.3e})")]
    Singular(f64),
    #[error("Gram matrix is rank deficient")]
    RankDeficient,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Estimated condition number above which Hermitian solves are rejected.
const MAX_CONDITION: f64 = 1e14;

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        CMatrix {
            rows,
            cols,
            data: vec![Complex64::default(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, Complex64::new(1.0, 0.0));
        }
        m
    }

    /// Square matrix with the given real diagonal.
    pub fn diag(values: &[f64]) -> Self {
        let mut m = CMatrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, Complex64::new(v, 0.0));
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = CMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, f(r, c));
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn conj_transpose(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |r, c| self.at(c, r).conj())
    }

    pub fn mul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, other.rows, "matrix product dimension mismatch");
        let mut out = CMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(r, k);
                if a == Complex64::default() {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, v.len(), "matrix-vector dimension mismatch");
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut re = 0.0;
            let mut im = 0.0;
            for (a, b) in row.iter().zip(v) {
                re += a.re * b.re - a.im * b.im;
                im += a.re * b.im + a.im * b.re;
            }
            out.push(Complex64::new(re, im));
        }
        out
    }

    /// Matrix-vector product using only the lower triangle (for Cholesky
    /// factors, where the strict upper triangle is zero).
    pub fn lower_tri_mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert!(self.is_square());
        assert_eq!(self.cols, v.len());
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = &self.row(r)[..=r];
            let mut re = 0.0;
            let mut im = 0.0;
            for (a, b) in row.iter().zip(v) {
                re += a.re * b.re - a.im * b.im;
                im += a.re * b.im + a.im * b.re;
            }
            out.push(Complex64::new(re, im));
        }
        out
    }

    pub fn scaled(&self, s: f64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn add(&self, other: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
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
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
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

    pub fn add_diag(&self, v: f64) -> CMatrix {
        assert!(self.is_square());
        let mut out = self.clone();
        for i in 0..self.rows {
            let z = out.at(i, i);
            out.set(i, i, z + v);
        }
        out
    }

    pub fn trace(&self) -> Complex64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self.at(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest deviation from Hermitian symmetry, max |A_ij - conj(A_ji)|.
    pub fn hermitian_defect(&self) -> f64 {
        assert!(self.is_square());
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in r..self.cols {
                worst = worst.max((self.at(r, c) - self.at(c, r).conj()).norm());
            }
        }
        worst
    }
}

/// Inner product conj(a) . b.
#[inline]
pub fn inner_product(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    debug_assert_eq!(a.len(), b.len());
    let mut re = 0.0;
    let mut im = 0.0;
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re + x.im * y.im;
        im += x.re * y.im - x.im * y.re;
    }
    Complex64::new(re, im)
}

#[inline]
pub fn norm_sq(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// tr(A B) without forming the product.
pub fn trace_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    assert_eq!(a.cols(), b.rows());
    assert_eq!(a.rows(), b.cols());
    let mut acc = Complex64::default();
    for i in 0..a.rows() {
        let row = a.row(i);
        for (k, &av) in row.iter().enumerate() {
            acc += av * b.at(k, i);
        }
    }
    acc
}

/// Hermitian positive semi-definite matrix with a lazily computed, cached
/// lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct HermitianPsd {
    mat: CMatrix,
    chol: OnceLock<CMatrix>,
}

/// Relative tolerance for the Hermitian symmetry check.
const HERMITIAN_RTOL: f64 = 1e-12;

impl HermitianPsd {
    /// Wrap a square matrix, checking Hermitian symmetry to relative
    /// tolerance 1e-12 and storing the exactly symmetrized (A + A^H)/2.
    pub fn new(mat: CMatrix) -> Result<Self, LinalgError> {
        if !mat.is_square() {
            return Err(LinalgError::Dimension(format!(
                "{}x{} matrix is not square",
                mat.rows(),
                mat.cols()
            )));
        }
        let scale = mat.max_abs();
        if scale > 0.0 && mat.hermitian_defect() > HERMITIAN_RTOL * scale {
            return Err(LinalgError::NotHermitian);
        }
        Ok(Self::new_unchecked(mat))
    }

    /// Wrap a matrix known Hermitian by construction; still symmetrizes so
    /// downstream factorizations see an exactly Hermitian operand.
    pub fn new_unchecked(mat: CMatrix) -> Self {
        let n = mat.rows();
        let mut sym = mat;
        for r in 0..n {
            for c in (r + 1)..n {
                let v = (sym.at(r, c) + sym.at(c, r).conj()) * 0.5;
                sym.set(r, c, v);
                sym.set(c, r, v.conj());
            }
            let d = sym.at(r, r);
            sym.set(r, r, Complex64::new(d.re, 0.0));
        }
        HermitianPsd {
            mat: sym,
            chol: OnceLock::new(),
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn trace_re(&self) -> f64 {
        self.mat.trace().re
    }

    /// Lower-triangular factor L with L L^H = A. Numerically semi-definite
    /// inputs get one retry with a diagonal jitter of 1e-12 tr(A)/n.
    pub fn cholesky(&self) -> Result<&CMatrix, LinalgError> {
        if let Some(l) = self.chol.get() {
            return Ok(l);
        }
        let l = match cholesky_attempt(&self.mat) {
            Ok(l) => l,
            Err(_) => {
                let jitter = 1e-12 * self.trace_re() / self.dim() as f64;
                cholesky_attempt(&self.mat.add_diag(jitter)).map_err(|_| LinalgError::NotPsd)?
            }
        };
        Ok(self.chol.get_or_init(|| l))
    }
}

fn cholesky_attempt(a: &CMatrix) -> Result<CMatrix, usize> {
    let n = a.rows();
    let scale = (0..n).map(|i| a.at(i, i).re).fold(0.0, f64::max);
    // pivots within this band of zero are treated as exact zeros
    // (semi-definite directions); anything below fails the attempt
    let tol = 1e-15 * scale;
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a.at(j, j).re;
        for k in 0..j {
            pivot -= l.at(j, k).norm_sqr();
        }
        if !pivot.is_finite() || pivot < -tol {
            return Err(j);
        }
        if pivot <= tol {
            // zero pivot: for a PSD matrix the rest of the column is zero
            continue;
        }
        let d = pivot.sqrt();
        l.set(j, j, Complex64::new(d, 0.0));
        for i in (j + 1)..n {
            let mut v = a.at(i, j);
            for k in 0..j {
                v -= l.at(i, k) * l.at(j, k).conj();
            }
            l.set(i, j, v / d);
        }
    }
    Ok(l)
}

/// Lower-triangular Cholesky factor of a Hermitian PSD matrix (see
/// [`HermitianPsd::cholesky`] for the jitter policy).
pub fn cholesky_factor(a: &HermitianPsd) -> Result<CMatrix, LinalgError> {
    a.cholesky().cloned()
}

/// Draw one vector from CN(0, R): L v with v i.i.d. standard
/// circularly-symmetric complex Gaussian.
pub fn sample_cn<R: Rng + ?Sized>(
    r: &HermitianPsd,
    rng: &mut R,
) -> Result<Vec<Complex64>, LinalgError> {
    let l = r.cholesky()?;
    let v = standard_complex_vector(r.dim(), rng);
    Ok(l.lower_tri_mul_vec(&v))
}

fn solve_with_factor(l: &CMatrix, b: &CMatrix) -> CMatrix {
    let n = l.rows();
    let mut x = b.clone();
    // forward: L y = b
    for col in 0..x.cols() {
        for i in 0..n {
            let mut v = x.at(i, col);
            for k in 0..i {
                v -= l.at(i, k) * x.at(k, col);
            }
            x.set(i, col, v / l.at(i, i).re);
        }
        // backward: L^H x = y
        for i in (0..n).rev() {
            let mut v = x.at(i, col);
            for k in (i + 1)..n {
                v -= l.at(k, i).conj() * x.at(k, col);
            }
            x.set(i, col, v / l.at(i, i).re);
        }
    }
    x
}

/// Solve A x = b for Hermitian PSD `a` via its Cholesky factor. Rejects
/// systems whose estimated condition number (squared ratio of extreme
/// Cholesky pivots) exceeds 1e14.
pub fn hermitian_solve(a: &HermitianPsd, b: &CMatrix) -> Result<CMatrix, LinalgError> {
    if b.rows() != a.dim() {
        return Err(LinalgError::Dimension(format!(
            "rhs has {} rows, matrix is {}x{}",
            b.rows(),
            a.dim(),
            a.dim()
        )));
    }
    let l = a.cholesky()?;
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0f64;
    for i in 0..l.rows() {
        let d = l.at(i, i).re;
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    let cond_est = (dmax / dmin).powi(2);
    if !cond_est.is_finite() || cond_est > MAX_CONDITION {
        return Err(LinalgError::Singular(cond_est));
    }
    Ok(solve_with_factor(l, b))
}

/// Z = G (G^H G)^{-1} for an M x K matrix G with M >= K, so that G^H Z = I.
///
/// The Gram solve is strict: no jitter retry, and an estimated condition
/// number above 1e14 is treated as rank deficiency.
pub fn gram_pseudoinverse_columns(g: &CMatrix) -> Result<CMatrix, LinalgError> {
    let (m, k) = (g.rows(), g.cols());
    if m < k {
        return Err(LinalgError::Dimension(format!(
            "need at least as many rows as columns, got {m}x{k}"
        )));
    }
    let gram = HermitianPsd::new_unchecked(g.conj_transpose().mul(g));
    let l = cholesky_attempt(gram.matrix()).map_err(|_| LinalgError::RankDeficient)?;
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0f64;
    for i in 0..k {
        let d = l.at(i, i).re;
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    if !((dmax / dmin).powi(2) < MAX_CONDITION) {
        return Err(LinalgError::RankDeficient);
    }
    Ok(g.mul(&solve_with_factor(&l, &CMatrix::identity(k))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, stream};
    use approx::assert_relative_eq;

    fn random_psd(n: usize, seed: u64) -> HermitianPsd {
        let mut rng = derive_rng(seed, &[stream::GENERIC, n as u64]);
        let b = CMatrix::from_fn(n, n, |_, _| crate::rng::standard_complex(&mut rng));
        HermitianPsd::new_unchecked(b.mul(&b.conj_transpose()))
    }

    #[test]
    fn cholesky_identity() {
        let a = HermitianPsd::new(CMatrix::identity(4)).unwrap();
        assert_eq!(*a.cholesky().unwrap(), CMatrix::identity(4));
    }

    #[test]
    fn cholesky_diagonal() {
        let a = HermitianPsd::new(CMatrix::diag(&[4.0, 9.0])).unwrap();
        assert_eq!(*a.cholesky().unwrap(), CMatrix::diag(&[2.0, 3.0]));
    }

    #[test]
    fn cholesky_reconstructs_random_psd() {
        for seed in 0..8 {
            let a = random_psd(12, seed);
            let l = a.cholesky().unwrap();
            let rec = l.mul(&l.conj_transpose());
            let rel = rec.sub(a.matrix()).frobenius_norm() / a.matrix().frobenius_norm();
            assert!(rel < 1e-9, "seed {seed}: relative error {rel:.3e}");
        }
    }

    #[test]
    fn cholesky_handles_rank_deficient_with_jitter() {
        // rank-1 b b^H is only semi-definite; the jitter retry must succeed
        let mut rng = derive_rng(5, &[stream::GENERIC]);
        let b = crate::rng::standard_complex_vector(8, &mut rng);
        let a = HermitianPsd::new_unchecked(CMatrix::from_fn(8, 8, |r, c| b[r] * b[c].conj()));
        let l = a.cholesky().unwrap();
        let rec = l.mul(&l.conj_transpose());
        let rel = rec.sub(a.matrix()).frobenius_norm() / a.matrix().frobenius_norm();
        assert!(rel < 1e-9);
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut m = CMatrix::identity(3);
        m.set(0, 1, Complex64::new(1.0, 0.0));
        assert!(matches!(
            HermitianPsd::new(m),
            Err(LinalgError::NotHermitian)
        ));
    }

    #[test]
    fn indefinite_rejected() {
        let a = HermitianPsd::new(CMatrix::diag(&[1.0, -1.0])).unwrap();
        assert!(matches!(a.cholesky(), Err(LinalgError::NotPsd)));
    }

    #[test]
    fn sample_cn_zero_matrix_gives_zero_vector() {
        let a = HermitianPsd::new_unchecked(CMatrix::zeros(4, 4));
        let mut rng = derive_rng(1, &[stream::GENERIC]);
        let v = sample_cn(&a, &mut rng).unwrap();
        assert!(v.iter().all(|z| z.norm() < 1e-8));
    }

    #[test]
    fn sample_cn_identity_covariance() {
        let m = 8;
        let a = HermitianPsd::new(CMatrix::identity(m)).unwrap();
        let mut rng = derive_rng(2, &[stream::GENERIC]);
        let n = 100_000;
        let mut cov = CMatrix::zeros(m, m);
        let mut mean = vec![Complex64::default(); m];
        for _ in 0..n {
            let v = sample_cn(&a, &mut rng).unwrap();
            for r in 0..m {
                mean[r] += v[r];
                for c in 0..m {
                    let upd = cov.at(r, c) + v[r] * v[c].conj();
                    cov.set(r, c, upd);
                }
            }
        }
        let cov = cov.scaled(1.0 / n as f64);
        let rel = cov.sub(a.matrix()).frobenius_norm() / a.matrix().frobenius_norm();
        assert!(rel < 0.05, "sample covariance off by {rel:.3e}");
        // empirical mean has norm O(sqrt(tr R / N))
        let mean_norm = norm_sq(&mean.iter().map(|z| z / n as f64).collect::<Vec<_>>()).sqrt();
        let bound = 4.0 * (a.trace_re() / n as f64).sqrt();
        assert!(mean_norm < bound, "{mean_norm:.3e} vs {bound:.3e}");
    }

    #[test]
    fn sample_cn_rank_one_is_collinear() {
        let mut rng = derive_rng(9, &[stream::GENERIC]);
        let b = crate::rng::standard_complex_vector(6, &mut rng);
        let a = HermitianPsd::new_unchecked(CMatrix::from_fn(6, 6, |r, c| b[r] * b[c].conj()));
        for _ in 0..16 {
            let v = sample_cn(&a, &mut rng).unwrap();
            // project out the b direction; residual must be negligible
            let coef = inner_product(&b, &v) / norm_sq(&b);
            let resid: f64 = v
                .iter()
                .zip(&b)
                .map(|(vi, bi)| (vi - coef * bi).norm_sqr())
                .sum();
            assert!(resid.sqrt() < 1e-5 * norm_sq(&b).sqrt());
        }
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let a = HermitianPsd::new(CMatrix::identity(3)).unwrap();
        let b = CMatrix::from_fn(3, 2, |r, c| Complex64::new((r + c) as f64, r as f64));
        assert_eq!(hermitian_solve(&a, &b).unwrap(), b);
    }

    #[test]
    fn solve_diagonal() {
        let a = HermitianPsd::new(CMatrix::diag(&[2.0, 4.0])).unwrap();
        let b = CMatrix::from_fn(2, 1, |r, _| Complex64::new(2.0 * (r + 1) as f64, 0.0));
        let x = hermitian_solve(&a, &b).unwrap();
        assert_relative_eq!(x.at(0, 0).re, 1.0, epsilon = 1e-14);
        assert_relative_eq!(x.at(1, 0).re, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn solve_round_trip() {
        for seed in 0..6 {
            let a = random_psd(10, 100 + seed);
            let mut rng = derive_rng(seed, &[stream::GENERIC, 77]);
            let xs = CMatrix::from_fn(10, 3, |_, _| crate::rng::standard_complex(&mut rng));
            let b = a.matrix().mul(&xs);
            let x = hermitian_solve(&a, &b).unwrap();
            let rel = x.sub(&xs).frobenius_norm() / xs.frobenius_norm();
            assert!(rel < 1e-8, "seed {seed}: {rel:.3e}");
        }
    }

    #[test]
    fn solve_rejects_huge_condition() {
        let a = HermitianPsd::new(CMatrix::diag(&[1e16, 1.0])).unwrap();
        let b = CMatrix::zeros(2, 1);
        assert!(matches!(
            hermitian_solve(&a, &b),
            Err(LinalgError::Singular(_))
        ));
    }

    #[test]
    fn pseudoinverse_single_column() {
        let mut rng = derive_rng(4, &[stream::GENERIC]);
        let g_vec = crate::rng::standard_complex_vector(5, &mut rng);
        let g = CMatrix::from_fn(5, 1, |r, _| g_vec[r]);
        let z = gram_pseudoinverse_columns(&g).unwrap();
        let scale = 1.0 / norm_sq(&g_vec);
        for r in 0..5 {
            assert!((z.at(r, 0) - g_vec[r] * scale).norm() < 1e-12);
        }
    }

    #[test]
    fn pseudoinverse_orthonormal_columns() {
        // orthonormal columns: Z = G
        let g = CMatrix::from_fn(4, 2, |r, c| {
            if r == c {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::default()
            }
        });
        let z = gram_pseudoinverse_columns(&g).unwrap();
        assert!(z.sub(&g).max_abs() < 1e-12);
    }

    #[test]
    fn pseudoinverse_defining_identity() {
        let mut rng = derive_rng(8, &[stream::GENERIC]);
        let g = CMatrix::from_fn(8, 3, |_, _| crate::rng::standard_complex(&mut rng));
        let z = gram_pseudoinverse_columns(&g).unwrap();
        let gz = g.conj_transpose().mul(&z);
        let err = gz.sub(&CMatrix::identity(3)).max_abs();
        assert!(err < 1e-8, "G^H Z - I max entry {err:.3e}");
    }

    #[test]
    fn pseudoinverse_rank_deficient() {
        // two identical columns
        let mut rng = derive_rng(11, &[stream::GENERIC]);
        let col = crate::rng::standard_complex_vector(6, &mut rng);
        let g = CMatrix::from_fn(6, 2, |r, _| col[r]);
        assert!(matches!(
            gram_pseudoinverse_columns(&g),
            Err(LinalgError::RankDeficient)
        ));
    }
}
