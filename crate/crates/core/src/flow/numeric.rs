//! Finite-difference oracles.

use crate::error::Result;
use crate::linalg::{plu_logabsdet, Matrix};

/// Default central-difference step for a coordinate with value `v`.
pub fn fd_step(v: f64) -> f64 {
    1e-5 * (1.0 + v.abs())
}

/// Central-difference Jacobian with a fixed step `h`; column `i` is
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn numeric_jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64], h: f64) -> Matrix {
    jacobian_with(f, x, |_| h)
}

/// Central-difference Jacobian using [`fd_step`] per coordinate.
pub fn numeric_jacobian_auto<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64]) -> Matrix {
    jacobian_with(f, x, fd_step)
}

fn jacobian_with<F: Fn(&[f64]) -> Vec<f64>, S: Fn(f64) -> f64>(f: F, x: &[f64], step: S) -> Matrix {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.to_vec();
    for i in 0..n {
        let h = step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
    }
    let m = cols.first().map_or(0, Vec::len);
    let mut data = vec![0.0; m * n];
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            data[r * n + c] = *v;
        }
    }
    Matrix::from_raw(m, n, data)
}

/// `log|det|` of the numeric Jacobian of `f` at `x`.
pub fn numeric_logdet<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64]) -> Result<f64> {
    Ok(plu_logabsdet(&numeric_jacobian_auto(f, x))?.0)
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i]);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let j = numeric_jacobian(|x| a.matvec(x), &[0.4, -2.0], 1e-5);
        assert!(j.sub(&a).frobenius_norm() < 1e-9);
    }

    #[test]
    fn elementwise_square() {
        let j = numeric_jacobian(|x| x.iter().map(|v| v * v).collect(), &[1.0, 2.0], 1e-5);
        let want = Matrix::diag(&[2.0, 4.0]).unwrap();
        assert!(j.sub(&want).frobenius_norm() < 1e-7);
    }

    #[test]
    fn scalar_gradient() {
        let g = numeric_gradient(|x| x[0] * x[0] * x[1], &[3.0, 2.0]);
        assert!((g[0] - 12.0).abs() < 1e-7 && (g[1] - 9.0).abs() < 1e-7);
    }
}
