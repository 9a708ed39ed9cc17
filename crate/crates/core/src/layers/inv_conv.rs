//! Invertible k x k convolution with stride k: a space-to-depth squeeze fused
//! with a 1x1 channel mixing by a square `k²c x k²c` weight.

use crate::error::{FlowError, Result};
use crate::flow::layer::{Bijector, Shape};
use crate::linalg::{Lu, Matrix};

#[derive(Debug, Clone)]
pub struct InvConv {
    k: usize,
    in_shape: Shape,
    weight: Vec<f64>,
    /// `gather[o]` is the input index feeding squeezed output slot `o`.
    gather: Vec<usize>,
}

impl InvConv {
    /// Identity-initialized convolution.
    pub fn new(in_shape: Shape, k: usize) -> Result<Self> {
        if k == 0 || in_shape.h % k != 0 || in_shape.w % k != 0 {
            return Err(FlowError::Shape(format!("spatial dims {}x{} not divisible by k={k}", in_shape.h, in_shape.w)));
        }
        let n = k * k * in_shape.c;
        let weight = Matrix::identity(n).into_data();
        let (ho, wo) = (in_shape.h / k, in_shape.w / k);
        let c = in_shape.c;
        let mut gather = Vec::with_capacity(in_shape.dim());
        for i in 0..ho {
            for j in 0..wo {
                for di in 0..k {
                    for dj in 0..k {
                        for ch in 0..c {
                            gather.push(((i * k + di) * in_shape.w + (j * k + dj)) * c + ch);
                        }
                    }
                }
            }
        }
        Ok(Self { k, in_shape, weight, gather })
    }

    pub fn with_weight(in_shape: Shape, k: usize, weight: Matrix) -> Result<Self> {
        let mut conv = Self::new(in_shape, k)?;
        let n = conv.channels_out();
        if weight.rows() != n || weight.cols() != n {
            return Err(FlowError::Shape(format!("weight must be {n}x{n}")));
        }
        conv.weight = weight.into_data();
        Ok(conv)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn in_shape(&self) -> Shape {
        self.in_shape
    }

    pub fn channels_out(&self) -> usize {
        self.k * self.k * self.in_shape.c
    }

    fn positions(&self) -> usize {
        self.in_shape.positions() / (self.k * self.k)
    }

    pub fn weight(&self) -> Matrix {
        let n = self.channels_out();
        Matrix::from_raw(n, n, self.weight.clone())
    }

    pub fn set_weight(&mut self, weight: &Matrix) {
        self.weight.copy_from_slice(weight.data());
    }

    fn factor(&self) -> Result<Lu> {
        Lu::factor(&self.weight()).map_err(|e| FlowError::NonInvertibleParams(format!("convolution weight: {e}")))
    }

    /// `positions * log|det W|`.
    pub fn logdet(&self) -> Result<f64> {
        Ok(self.positions() as f64 * self.factor()?.logabsdet().0)
    }
}

impl Bijector for InvConv {
    fn dim(&self) -> usize {
        self.in_shape.dim()
    }

    fn params(&self) -> &[f64] {
        &self.weight
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let lu = self.factor()?;
        let n = self.channels_out();
        let w = self.weight();
        let mut y = vec![0.0; x.len()];
        let mut v = vec![0.0; n];
        for p in 0..self.positions() {
            for (o, slot) in v.iter_mut().enumerate() {
                *slot = x[self.gather[p * n + o]];
            }
            y[p * n..(p + 1) * n].copy_from_slice(&w.matvec(&v));
        }
        Ok((y, self.positions() as f64 * lu.logabsdet().0))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let lu = self.factor()?;
        let n = self.channels_out();
        let mut x = vec![0.0; y.len()];
        for p in 0..self.positions() {
            let v = lu.solve(&y[p * n..(p + 1) * n]);
            for (o, val) in v.into_iter().enumerate() {
                x[self.gather[p * n + o]] = val;
            }
        }
        Ok((x, -(self.positions() as f64) * lu.logabsdet().0))
    }

    fn backward(&self, x: &[f64], grad_out: &[f64], grad_params: &mut [f64]) -> Result<Vec<f64>> {
        let lu = self.factor()?;
        let n = self.channels_out();
        let w = self.weight();
        let mut gx = vec![0.0; x.len()];
        let mut v = vec![0.0; n];
        for p in 0..self.positions() {
            for (o, slot) in v.iter_mut().enumerate() {
                *slot = x[self.gather[p * n + o]];
            }
            let gy = &grad_out[p * n..(p + 1) * n];
            for (r, g) in gy.iter().enumerate() {
                for (c, vc) in v.iter().enumerate() {
                    grad_params[r * n + c] += g * vc;
                }
            }
            for (o, val) in w.tr_matvec(gy).into_iter().enumerate() {
                gx[self.gather[p * n + o]] = val;
            }
        }
        // d log|det W| / dW = W^{-T}
        let inv = lu.inverse();
        let npos = self.positions() as f64;
        for r in 0..n {
            for c in 0..n {
                grad_params[r * n + c] += npos * inv[(c, r)];
            }
        }
        Ok(gx)
    }

    fn out_shape(&self, input: Shape) -> Shape {
        Shape::new(input.h / self.k, input.w / self.k, input.c * self.k * self.k)
    }
}
