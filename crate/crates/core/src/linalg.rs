//! Dense linear algebra kernel.
//!
//! Row-major `f64` matrices with the handful of decompositions the flow layers
//! and the closed-form likelihood oracle need: partial-pivot LU (determinants
//! and inverses), cyclic Jacobi for symmetric eigenproblems, and power
//! iteration for the spectral norm. Sizes here stay small (a few hundred at
//! most), so nothing is blocked or tiled.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{FlowError, Result};

/// Tolerances used by the kernel. Every field can be overridden.
#[derive(Debug, Clone, Copy)]
pub struct LinalgConfig {
    /// Pivots below this magnitude mark the matrix singular.
    pub singular_pivot: f64,
    /// Jacobi stops once the off-diagonal Frobenius norm drops below
    /// `jacobi_tol * ||S||_F`.
    pub jacobi_tol: f64,
    pub jacobi_max_sweeps: usize,
    pub power_tol: f64,
    pub power_max_iter: usize,
}

impl Default for LinalgConfig {
    fn default() -> Self {
        Self {
            singular_pivot: 1e-300,
            jacobi_tol: 1e-12,
            jacobi_max_sweeps: 100,
            power_tol: 1e-8,
            power_max_iter: 10_000,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FlowError::Shape(format!(
                "expected {} entries for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(FlowError::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self::new(n, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T x` without materializing the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "tr_matvec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * xr;
            }
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix::from_raw(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        let mut s = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                s[(r, c)] = 0.5 * (self[(r, c)] + self[(c, r)]);
            }
        }
        s
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Partial-pivot LU factorization `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Lu> {
        Self::factor_with(a, &LinalgConfig::default())
    }

    pub fn factor_with(a: &Matrix, cfg: &LinalgConfig) -> Result<Lu> {
        if !a.is_square() {
            return Err(FlowError::Shape(format!("LU needs a square matrix, got {}x{}", a.rows, a.cols)));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pmag) = (k..n)
                .map(|r| (r, lu[(r, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pmag >= cfg.singular_pivot) {
                return Err(FlowError::Singular { pivot: pmag.max(0.0) });
            }
            if p != k {
                for c in 0..n {
                    lu.data.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for r in k + 1..n {
                let factor = lu[(r, k)] / pivot;
                lu[(r, k)] = factor;
                if factor != 0.0 {
                    for c in k + 1..n {
                        lu.data[r * n + c] -= factor * lu.data[k * n + c];
                    }
                }
            }
        }
        Ok(Lu { lu, perm, sign })
    }

    pub fn logabsdet(&self) -> (f64, f64) {
        let n = self.lu.rows;
        let mut log = 0.0;
        let mut sign = self.sign;
        for i in 0..n {
            let d = self.lu[(i, i)];
            log += d.abs().ln();
            if d < 0.0 {
                sign = -sign;
            }
        }
        (log, sign)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[(i, i)];
        }
        x
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.lu.rows;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        inv
    }
}

/// `(log|det a|, sign(det a))` via partial-pivot LU.
pub fn plu_logabsdet(a: &Matrix) -> Result<(f64, f64)> {
    Ok(Lu::factor(a)?.logabsdet())
}

pub fn invert(a: &Matrix) -> Result<Matrix> {
    Ok(Lu::factor(a)?.inverse())
}

/// Eigenvalues in descending order with unit eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenPair {
    /// `V diag(values) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        let mut out = Matrix::zeros(n, n);
        for (k, lambda) in self.values.iter().enumerate() {
            for r in 0..n {
                let vr = self.vectors[(r, k)] * lambda;
                for c in 0..n {
                    out[(r, c)] += vr * self.vectors[(c, k)];
                }
            }
        }
        out
    }
}

pub fn sym_eig(s: &Matrix) -> Result<EigenPair> {
    sym_eig_with(s, &LinalgConfig::default())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. The input is
/// symmetrized first, so tiny asymmetries from round-off are harmless.
pub fn sym_eig_with(s: &Matrix, cfg: &LinalgConfig) -> Result<EigenPair> {
    if !s.is_square() {
        return Err(FlowError::Shape(format!("sym_eig needs a square matrix, got {}x{}", s.rows, s.cols)));
    }
    let n = s.rows;
    let mut a = s.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let off = |a: &Matrix| -> f64 {
        let mut acc = 0.0;
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    acc += a[(r, c)].powi(2);
                }
            }
        }
        acc.sqrt()
    };
    if scale > 0.0 {
        for _ in 0..cfg.jacobi_max_sweeps {
            if off(&a) <= cfg.jacobi_tol * scale {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - sn * akq;
                        a[(k, q)] = sn * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - sn * aqk;
                        a[(q, k)] = sn * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - sn * vkq;
                        v[(k, q)] = sn * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, dst)] = v[(r, src)];
        }
    }
    Ok(EigenPair { values, vectors })
}

/// Result of power iteration. `converged == false` is a warning: the value
/// is still the best estimate seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn power_iteration(a: &Matrix, start: Vec<f64>, tol: f64, max_iter: usize) -> SpectralEstimate {
    let mut v = start;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0;
    for it in 1..=max_iter {
        let w = a.tr_matvec(&a.matvec(&v));
        let next = dot(&v, &w);
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return SpectralEstimate { value: 0.0, converged: true, iterations: it };
        }
        v = w.into_iter().map(|x| x / wn).collect();
        if (next - lambda).abs() <= tol * next.abs() {
            return SpectralEstimate { value: next.max(0.0).sqrt(), converged: true, iterations: it };
        }
        lambda = next;
    }
    SpectralEstimate { value: lambda.max(0.0).sqrt(), converged: false, iterations: max_iter }
}

/// Largest singular value by power iteration on `a^T a`.
///
/// Starts from the normalized all-ones vector. The largest column norm is a
/// lower bound on the answer; if the iterate stalls below it the start was
/// (numerically) orthogonal to the top singular vector, so it is perturbed by
/// 1e-6 and restarted.
pub fn spectral_norm(a: &Matrix, tol: f64, max_iter: usize) -> SpectralEstimate {
    let n = a.cols;
    if n == 0 || a.rows == 0 {
        return SpectralEstimate { value: 0.0, converged: true, iterations: 0 };
    }
    let col_bound = a.column_norms().into_iter().fold(0.0, f64::max);
    let mut est = power_iteration(a, vec![1.0; n], tol, max_iter);
    if est.value < col_bound * (1.0 - tol) {
        let start: Vec<f64> = (0..n).map(|i| 1.0 + 1e-6 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let retry = power_iteration(a, start, tol, max_iter);
        if retry.value > est.value {
            est = SpectralEstimate { iterations: est.iterations + retry.iterations, ..retry };
        }
    }
    est.value = est.value.max(col_bound);
    est
}
