//! Monotonic rational-quadratic spline on all of ℝ.
//!
//! Inner knots come from three unconstrained vectors `theta_x, theta_y,
//! theta_a` of length `I + 1` and a box scale `w`:
//!
//! ```text
//! bx   = softmax(theta_x)
//! by   = sigmoid(theta_y) * bx
//! x[i] = (2 cumsum(bx)[i] - 1) w
//! y[i] = (2 cumsum(by)[i] - sum(by)) w
//! a[i] = sigmoid(theta_a)[i]
//! ```
//!
//! so every inner bin has height/width ratio in (0, 1] and every knot slope in
//! (0, 1). Two outer bins run from the extreme inner knots to fixed far knots
//! at `(±1e5, ±outer_slope·1e5)` with slope `outer_slope`, and beyond those the
//! map continues linearly with the same slope.

use crate::error::{FlowError, Result};
use crate::special::logistic;

pub const FAR_BOUNDARY: f64 = 1e5;

/// Where a point falls relative to the extended knot array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Below,
    /// Extended bin index: 0 is the left outer bin, `I + 1` the right one.
    Bin(usize),
    Above,
}

#[derive(Debug, Clone)]
pub struct KnotSet {
    /// Extended knots: far-left, the `I + 1` inner knots, far-right.
    xs: Vec<f64>,
    ys: Vec<f64>,
    alphas: Vec<f64>,
    outer_slope: f64,
    w: f64,
    p: Vec<f64>,
    cum_p: Vec<f64>,
    sig_y: Vec<f64>,
    q: Vec<f64>,
    cum_q: Vec<f64>,
}

/// Partial derivatives of one bin evaluation with respect to
/// `(x_lo, x_hi, y_lo, y_hi, alpha_lo, alpha_hi)`.
pub type KnotPartials = [f64; 6];

#[derive(Debug, Clone, Copy)]
pub struct SplineGrad {
    pub y: f64,
    pub dydx: f64,
    /// `d log(dy/dx) / dx`
    pub dlog_dx: f64,
    pub region: Region,
    pub dy_dknots: KnotPartials,
    pub dlog_dknots: KnotPartials,
}

/// Gradient with respect to the raw spline parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrad {
    pub theta_x: Vec<f64>,
    pub theta_y: Vec<f64>,
    pub theta_a: Vec<f64>,
    pub w: f64,
}

impl RawGrad {
    pub fn zeros(n: usize) -> Self {
        Self { theta_x: vec![0.0; n], theta_y: vec![0.0; n], theta_a: vec![0.0; n], w: 0.0 }
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn cumsum(v: &[f64]) -> Vec<f64> {
    v.iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Builds the knot set. `theta_*` must share a length `I + 1 >= 2`; `w > 0`.
pub fn knots_from_params(theta_x: &[f64], theta_y: &[f64], theta_a: &[f64], w: f64, outer_slope: f64) -> Result<KnotSet> {
    let n = theta_x.len();
    if n < 2 || theta_y.len() != n || theta_a.len() != n {
        return Err(FlowError::Shape(format!(
            "knot parameter vectors must share a length >= 2 (got {}, {}, {})",
            n,
            theta_y.len(),
            theta_a.len()
        )));
    }
    if !(w > 0.0) || !(outer_slope > 0.0) {
        return Err(FlowError::Shape(format!("box scale ({w}) and outer slope ({outer_slope}) must be positive")));
    }
    let p = softmax(theta_x);
    let cum_p = cumsum(&p);
    let sig_y: Vec<f64> = theta_y.iter().map(|&t| logistic(t)).collect();
    let q: Vec<f64> = p.iter().zip(&sig_y).map(|(a, b)| a * b).collect();
    let cum_q = cumsum(&q);
    let total = cum_q[n - 1];

    let mut xs = Vec::with_capacity(n + 2);
    let mut ys = Vec::with_capacity(n + 2);
    let mut alphas = Vec::with_capacity(n + 2);
    xs.push(-FAR_BOUNDARY);
    ys.push(-outer_slope * FAR_BOUNDARY);
    alphas.push(outer_slope);
    for i in 0..n {
        xs.push((2.0 * cum_p[i] - 1.0) * w);
        ys.push((2.0 * cum_q[i] - total) * w);
        alphas.push(logistic(theta_a[i]));
    }
    xs.push(FAR_BOUNDARY);
    ys.push(outer_slope * FAR_BOUNDARY);
    alphas.push(outer_slope);
    Ok(KnotSet { xs, ys, alphas, outer_slope, w, p, cum_p, sig_y, q, cum_q })
}

struct BinEval {
    y: f64,
    dydx: f64,
    dlog_dx: f64,
    dy: KnotPartials,
    dlog: KnotPartials,
}

/// Rational-quadratic segment between `(x0, y0)` and `(x1, y1)` with end
/// slopes `a0`, `a1`, evaluated at `x` with all partials.
fn rq_segment(x0: f64, x1: f64, y0: f64, y1: f64, a0: f64, a1: f64, x: f64) -> BinEval {
    let dx = x1 - x0;
    let dy = y1 - y0;
    let delta = dy / dx;
    let xi = (x - x0) / dx;
    let u = xi * (1.0 - xi);
    let rho = a0 + a1 - 2.0 * delta;
    let num = delta * xi * xi + a0 * u;
    let den = delta + rho * u;
    let r = num / den;
    let y = y0 + dy * r;

    let gamma = a1 * xi * xi + 2.0 * delta * u + a0 * (1.0 - xi) * (1.0 - xi);
    let dydx = delta * delta * gamma / (den * den);

    let den2 = den * den;
    let n_xi = 2.0 * delta * xi + a0 * (1.0 - 2.0 * xi);
    let d_xi = rho * (1.0 - 2.0 * xi);
    let r_xi = (n_xi * den - num * d_xi) / den2;
    let d_delta = 1.0 - 2.0 * u;
    let r_delta = (xi * xi * den - num * d_delta) / den2;
    let r_a0 = u * (den - num) / den2;
    let r_a1 = -num * u / den2;

    // y in terms of (x0, dx, y0, dy, a0, a1)
    let y_x0 = -dy * r_xi / dx;
    let y_dx = dy * (-r_xi * xi / dx - r_delta * delta / dx);
    let y_dy = r + delta * r_delta;
    let dy_parts = [y_x0 - y_dx, y_dx, 1.0 - y_dy, y_dy, dy * r_a0, dy * r_a1];

    let g_xi = 2.0 * a1 * xi + 2.0 * delta * (1.0 - 2.0 * xi) - 2.0 * a0 * (1.0 - xi);
    let l_xi = g_xi / gamma - 2.0 * d_xi / den;
    let l_delta = 2.0 / delta + 2.0 * u / gamma - 2.0 * d_delta / den;
    let l_a0 = (1.0 - xi) * (1.0 - xi) / gamma - 2.0 * u / den;
    let l_a1 = xi * xi / gamma - 2.0 * u / den;
    let l_x0 = -l_xi / dx;
    let l_dx = -l_xi * xi / dx - l_delta * delta / dx;
    let l_dy = l_delta / dx;
    let dlog_parts = [l_x0 - l_dx, l_dx, -l_dy, l_dy, l_a0, l_a1];

    BinEval { y, dydx, dlog_dx: l_xi / dx, dy: dy_parts, dlog: dlog_parts }
}

/// Solves the bin quadratic for `x` given `y`, taking the root in `[0, 1]`.
fn rq_segment_inverse(x0: f64, x1: f64, y0: f64, y1: f64, a0: f64, a1: f64, y: f64) -> Result<f64> {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let delta = dy / dx;
    let rel = y - y0;
    let rho = a0 + a1 - 2.0 * delta;
    let qa = dy * (delta - a0) + rel * rho;
    let qb = dy * a0 - rel * rho;
    let qc = -delta * rel;
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
    let denom = -qb - disc.sqrt();
    let xi = if denom == 0.0 { 0.0 } else { 2.0 * qc / denom };
    if !xi.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&xi) {
        return Err(FlowError::NoRootInBin);
    }
    Ok(x0 + xi.clamp(0.0, 1.0) * dx)
}

impl KnotSet {
    /// Number of inner bins `I`.
    pub fn bins(&self) -> usize {
        self.xs.len() - 3
    }

    pub fn inner_x(&self) -> &[f64] {
        &self.xs[1..self.xs.len() - 1]
    }

    pub fn inner_y(&self) -> &[f64] {
        &self.ys[1..self.ys.len() - 1]
    }

    pub fn inner_alpha(&self) -> &[f64] {
        &self.alphas[1..self.alphas.len() - 1]
    }

    pub fn extended_x(&self) -> &[f64] {
        &self.xs
    }

    pub fn extended_y(&self) -> &[f64] {
        &self.ys
    }

    pub fn extended_alpha(&self) -> &[f64] {
        &self.alphas
    }

    pub fn outer_slope(&self) -> f64 {
        self.outer_slope
    }

    pub fn box_scale(&self) -> f64 {
        self.w
    }

    /// Height/width ratio of inner bin `i` (between inner knots `i` and `i + 1`).
    pub fn delta(&self, i: usize) -> f64 {
        let (x, y) = (self.inner_x(), self.inner_y());
        (y[i + 1] - y[i]) / (x[i + 1] - x[i])
    }

    pub fn deltas(&self) -> Vec<f64> {
        (0..self.bins()).map(|i| self.delta(i)).collect()
    }

    fn locate_in(knots: &[f64], v: f64) -> Region {
        let last = knots.len() - 1;
        if v < knots[0] {
            return Region::Below;
        }
        if v > knots[last] {
            return Region::Above;
        }
        // largest j with knots[j] <= v, capped to the last bin
        let j = knots.partition_point(|k| *k <= v).saturating_sub(1);
        Region::Bin(j.min(last - 1))
    }

    pub fn locate(&self, x: f64) -> Region {
        Self::locate_in(&self.xs, x)
    }

    /// Evaluates bin `j` from whichever end is closer to `x`; the far outer
    /// bins are wide enough that measuring from the distant knot loses digits.
    fn segment(&self, j: usize, x: f64) -> BinEval {
        let (x0, x1, y0, y1) = (self.xs[j], self.xs[j + 1], self.ys[j], self.ys[j + 1]);
        let (a0, a1) = (self.alphas[j], self.alphas[j + 1]);
        if x - x0 <= x1 - x {
            return rq_segment(x0, x1, y0, y1, a0, a1, x);
        }
        let r = rq_segment(-x1, -x0, -y1, -y0, a1, a0, -x);
        BinEval {
            y: -r.y,
            dydx: r.dydx,
            dlog_dx: -r.dlog_dx,
            dy: [r.dy[1], r.dy[0], r.dy[3], r.dy[2], -r.dy[5], -r.dy[4]],
            dlog: [-r.dlog[1], -r.dlog[0], -r.dlog[3], -r.dlog[2], r.dlog[5], r.dlog[4]],
        }
    }

    /// `(f(x), f'(x))` using the formula of extended bin `j`, whether or
    /// not `x` lies inside it.
    pub fn eval_in_bin(&self, j: usize, x: f64) -> (f64, f64) {
        let b = self.segment(j, x);
        (b.y, b.dydx)
    }

    /// `(f(x), f'(x))`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let g = self.eval_grad(x);
        (g.y, g.dydx)
    }

    pub fn eval_grad(&self, x: f64) -> SplineGrad {
        let last = self.xs.len() - 1;
        match self.locate(x) {
            Region::Below => SplineGrad {
                y: self.ys[0] + self.outer_slope * (x - self.xs[0]),
                dydx: self.outer_slope,
                dlog_dx: 0.0,
                region: Region::Below,
                dy_dknots: [0.0; 6],
                dlog_dknots: [0.0; 6],
            },
            Region::Above => SplineGrad {
                y: self.ys[last] + self.outer_slope * (x - self.xs[last]),
                dydx: self.outer_slope,
                dlog_dx: 0.0,
                region: Region::Above,
                dy_dknots: [0.0; 6],
                dlog_dknots: [0.0; 6],
            },
            Region::Bin(j) => {
                let b = self.segment(j, x);
                SplineGrad { y: b.y, dydx: b.dydx, dlog_dx: b.dlog_dx, region: Region::Bin(j), dy_dknots: b.dy, dlog_dknots: b.dlog }
            }
        }
    }

    /// `(f^-1(y), d f^-1 / dy)`.
    pub fn inverse(&self, y: f64) -> Result<(f64, f64)> {
        let last = self.xs.len() - 1;
        match Self::locate_in(&self.ys, y) {
            Region::Below => Ok((self.xs[0] + (y - self.ys[0]) / self.outer_slope, 1.0 / self.outer_slope)),
            Region::Above => Ok((self.xs[last] + (y - self.ys[last]) / self.outer_slope, 1.0 / self.outer_slope)),
            Region::Bin(j) => {
                let (x0, x1, y0, y1) = (self.xs[j], self.xs[j + 1], self.ys[j], self.ys[j + 1]);
                let (a0, a1) = (self.alphas[j], self.alphas[j + 1]);
                let x = if y - y0 <= y1 - y {
                    rq_segment_inverse(x0, x1, y0, y1, a0, a1, y)?
                } else {
                    -rq_segment_inverse(-x1, -x0, -y1, -y0, a1, a0, -y)?
                };
                let (_, dydx) = self.eval(x);
                Ok((x, 1.0 / dydx))
            }
        }
    }

    /// Chains per-knot partials of extended bin `j` down to the raw
    /// parameters and adds them into `out`. `coeffs` follows the
    /// [`KnotPartials`] order.
    pub fn accumulate_raw_grad(&self, j: usize, coeffs: &KnotPartials, out: &mut RawGrad) {
        let n = self.p.len();
        let total = self.cum_q[n - 1];
        let w = self.w;
        for (side, ext) in [(0usize, j), (1usize, j + 1)] {
            if ext == 0 || ext == n + 1 {
                continue;
            }
            let i = ext - 1;
            let (gx, gy, ga) = (coeffs[side], coeffs[2 + side], coeffs[4 + side]);
            if gx != 0.0 {
                let ci = self.cum_p[i];
                for m in 0..n {
                    let ind = if m <= i { 1.0 } else { 0.0 };
                    out.theta_x[m] += gx * 2.0 * w * self.p[m] * (ind - ci);
                }
                out.w += gx * self.xs[ext] / w;
            }
            if gy != 0.0 {
                let di = self.cum_q[i];
                for m in 0..n {
                    let ind = if m <= i { 1.0 } else { 0.0 };
                    let sig = self.sig_y[m];
                    out.theta_y[m] += gy * w * (2.0 * ind - 1.0) * sig * (1.0 - sig) * self.p[m];
                    let d_dj = ind * self.q[m] - self.p[m] * di;
                    let d_tot = self.q[m] - self.p[m] * total;
                    out.theta_x[m] += gy * w * (2.0 * d_dj - d_tot);
                }
                out.w += gy * self.ys[ext] / w;
            }
            if ga != 0.0 {
                let a = self.alphas[ext];
                out.theta_a[i] += ga * a * (1.0 - a);
            }
        }
    }
}

/// Applies the spline in either direction, returning the value and the
/// derivative of the applied map.
pub fn rq_activation_apply(kn: &KnotSet, direction: crate::flow::layer::Direction, x: f64) -> Result<(f64, f64)> {
    match direction {
        crate::flow::layer::Direction::Forward => Ok(kn.eval(x)),
        crate::flow::layer::Direction::Inverse => kn.inverse(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::layer::Direction;

    #[test]
    fn zero_params_two_bins() {
        let kn = knots_from_params(&[0.0; 3], &[0.0; 3], &[0.0; 3], 1.0, 0.5).unwrap();
        assert_eq!(kn.bins(), 2);
        let x = kn.inner_x();
        assert!((x[0] + 1.0 / 3.0).abs() < 1e-15 && (x[1] - 1.0 / 3.0).abs() < 1e-15 && (x[2] - 1.0).abs() < 1e-15);
        for i in 0..2 {
            assert!((x[i + 1] - x[i] - 2.0 / 3.0).abs() < 1e-15);
            assert!((kn.delta(i) - 0.5).abs() < 1e-15);
        }
        assert!(kn.inner_alpha().iter().all(|a| *a == 0.5));
    }

    #[test]
    fn saturated_heights_match_widths() {
        let kn = knots_from_params(&[0.3, -0.2, 1.0], &[50.0; 3], &[0.0; 3], 2.0, 1.0).unwrap();
        for d in kn.deltas() {
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    fn segment(a0: f64, a1: f64, delta: f64) -> KnotSet {
        // a single-bin spline on [0, 1] -> [0, delta] embedded via the extended arrays
        KnotSet {
            xs: vec![-FAR_BOUNDARY, 0.0, 1.0, FAR_BOUNDARY],
            ys: vec![-FAR_BOUNDARY, 0.0, delta, FAR_BOUNDARY],
            alphas: vec![1.0, a0, a1, 1.0],
            outer_slope: 1.0,
            w: 1.0,
            p: vec![0.5, 0.5],
            cum_p: vec![0.5, 1.0],
            sig_y: vec![0.5, 0.5],
            q: vec![0.25, 0.25],
            cum_q: vec![0.25, 0.5],
        }
    }

    #[test]
    fn unit_bin_identity() {
        let kn = segment(1.0, 1.0, 1.0);
        for x in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let (y, d) = rq_activation_apply(&kn, Direction::Forward, x).unwrap();
            assert!((y - x).abs() < 1e-15 && (d - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_bin() {
        let kn = segment(0.5, 0.5, 1.0);
        let (y, _) = kn.eval(0.5);
        assert!((y - 0.5).abs() < 1e-15);
        let (_, d0) = kn.eval(0.0);
        assert!((d0 - 0.5).abs() < 1e-15);
        let (x, _) = kn.inverse(0.5).unwrap();
        assert!((x - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_degeneration() {
        let beta: f64 = 0.7;
        let t = crate::special::logit_clamped(beta);
        let kn = knots_from_params(&[0.4, -0.3, 0.0, 1.2], &[t; 4], &[t; 4], 1.5, beta).unwrap();
        for i in -300..=300 {
            let x = i as f64 * 0.01;
            let (y, d) = kn.eval(x);
            assert!((y - beta * x).abs() < 1e-12, "x={x} y={y}");
            assert!((d - beta).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_parameters_poison_the_knots() {
        let kn = knots_from_params(&[f64::NAN, 0.0, 0.0], &[0.0; 3], &[0.0; 3], 1.0, 0.5).unwrap();
        assert!(kn.inner_x().iter().any(|x| x.is_nan()));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(knots_from_params(&[0.0], &[0.0], &[0.0], 1.0, 0.5).is_err());
        assert!(knots_from_params(&[0.0; 3], &[0.0; 2], &[0.0; 3], 1.0, 0.5).is_err());
        assert!(knots_from_params(&[0.0; 3], &[0.0; 3], &[0.0; 3], 0.0, 0.5).is_err());
    }
}
