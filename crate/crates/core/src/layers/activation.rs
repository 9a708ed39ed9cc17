//! Elementwise layers: the rational-quadratic activation, the contractive
//! tanh / normal-CDF ablations, and a plain diagonal scale.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FlowError, Result};
use crate::flow::layer::{Bijector, LayerKind};
use crate::layers::spline::{knots_from_params, KnotSet, RawGrad, Region};
use crate::special::{logit_clamped, normal_cdf, normal_pdf, normal_quantile, LN_2PI};

/// Per-dimension rational-quadratic activation. Each coordinate owns its own
/// knot parameters, laid out as `[theta_x, theta_y, theta_a, log_w]`.
#[derive(Debug, Clone)]
pub struct RqActivation {
    d: usize,
    bins: usize,
    outer_slope: f64,
    params: Vec<f64>,
}

impl RqActivation {
    /// Linear with slope `beta` everywhere (uniform widths, every ratio and
    /// knot slope equal to `beta`), inner box half-width `width`.
    pub fn new(d: usize, bins: usize, beta: f64, width: f64) -> Result<Self> {
        if bins == 0 {
            return Err(FlowError::Shape("spline needs at least one bin".into()));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(FlowError::BadBeta(beta));
        }
        if !(width > 0.0) {
            return Err(FlowError::Shape(format!("box width must be positive, got {width}")));
        }
        let mut act = Self { d, bins, outer_slope: beta, params: vec![0.0; d * (3 * (bins + 1) + 1)] };
        act.set_linear(beta, width);
        Ok(act)
    }

    fn block(&self) -> usize {
        3 * (self.bins + 1) + 1
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn outer_slope(&self) -> f64 {
        self.outer_slope
    }

    pub fn set_linear(&mut self, beta: f64, width: f64) {
        let n = self.bins + 1;
        let t = logit_clamped(beta);
        let b = self.block();
        self.outer_slope = beta;
        for i in 0..self.d {
            let p = &mut self.params[i * b..(i + 1) * b];
            p[..n].iter_mut().for_each(|v| *v = 0.0);
            p[n..3 * n].iter_mut().for_each(|v| *v = t);
            p[3 * n] = width.ln();
        }
    }

    /// Draws every knot parameter from `N(0, scale²)`; the log box width is
    /// centred on `ln width`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64, width: f64) {
        let n = self.bins + 1;
        let b = self.block();
        for i in 0..self.d {
            let p = &mut self.params[i * b..(i + 1) * b];
            for v in p[..3 * n].iter_mut() {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
            p[3 * n] = width.ln() + 0.1 * scale * rng.sample::<f64, _>(StandardNormal);
        }
    }

    pub fn knots(&self, dim: usize) -> Result<KnotSet> {
        let n = self.bins + 1;
        let b = self.block();
        let p = &self.params[dim * b..(dim + 1) * b];
        knots_from_params(&p[..n], &p[n..2 * n], &p[2 * n..3 * n], p[3 * n].exp(), self.outer_slope)
    }
}

impl Bijector for RqActivation {
    fn dim(&self) -> usize {
        self.d
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut y = Vec::with_capacity(self.d);
        let mut logdet = 0.0;
        for (i, xi) in x.iter().enumerate() {
            let (v, d) = self.knots(i)?.eval(*xi);
            y.push(v);
            logdet += d.ln();
        }
        Ok((y, logdet))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut x = Vec::with_capacity(self.d);
        let mut logdet = 0.0;
        for (i, yi) in y.iter().enumerate() {
            let (v, d) = self.knots(i)?.inverse(*yi)?;
            x.push(v);
            logdet += d.ln();
        }
        Ok((x, logdet))
    }

    fn backward(&self, x: &[f64], grad_out: &[f64], grad_params: &mut [f64]) -> Result<Vec<f64>> {
        let n = self.bins + 1;
        let b = self.block();
        let mut gx = Vec::with_capacity(self.d);
        for (i, xi) in x.iter().enumerate() {
            let kn = self.knots(i)?;
            let g = kn.eval_grad(*xi);
            let go = grad_out[i];
            gx.push(go * g.dydx + g.dlog_dx);
            if let Region::Bin(j) = g.region {
                let mut coeffs = [0.0; 6];
                for k in 0..6 {
                    coeffs[k] = go * g.dy_dknots[k] + g.dlog_dknots[k];
                }
                let mut raw = RawGrad::zeros(n);
                kn.accumulate_raw_grad(j, &coeffs, &mut raw);
                let gp = &mut grad_params[i * b..(i + 1) * b];
                for m in 0..n {
                    gp[m] += raw.theta_x[m];
                    gp[n + m] += raw.theta_y[m];
                    gp[2 * n + m] += raw.theta_a[m];
                }
                // log_w parameterization
                gp[3 * n] += raw.w * kn.box_scale();
            }
        }
        Ok(gx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractiveKind {
    Tanh,
    NormalCdf,
}

/// Parameter-free squashing activation; its slope never exceeds 1.
#[derive(Debug, Clone)]
pub struct Contractive {
    kind: ContractiveKind,
    d: usize,
}

impl Contractive {
    pub fn new(kind: ContractiveKind, d: usize) -> Self {
        Self { kind, d }
    }

    pub fn kind(&self) -> LayerKind {
        match self.kind {
            ContractiveKind::Tanh => LayerKind::Tanh,
            ContractiveKind::NormalCdf => LayerKind::NormalCdf,
        }
    }

    pub fn contractive_kind(&self) -> ContractiveKind {
        self.kind
    }
}

/// `log(1 - tanh(x)^2)` without cancellation.
fn log_sech2(x: f64) -> f64 {
    let a = x.abs();
    2.0 * (std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p())
}

impl Bijector for Contractive {
    fn dim(&self) -> usize {
        self.d
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        Ok(match self.kind {
            ContractiveKind::Tanh => (x.iter().map(|v| v.tanh()).collect(), x.iter().map(|v| log_sech2(*v)).sum()),
            ContractiveKind::NormalCdf => (
                x.iter().map(|v| normal_cdf(*v)).collect(),
                x.iter().map(|v| -0.5 * (v * v + LN_2PI)).sum(),
            ),
        })
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut x = Vec::with_capacity(y.len());
        let mut logdet = 0.0;
        for v in y {
            match self.kind {
                ContractiveKind::Tanh => {
                    if !(v.abs() < 1.0) {
                        return Err(FlowError::OutOfDomain { what: "tanh inverse", value: *v });
                    }
                    let xi = v.atanh();
                    logdet -= log_sech2(xi);
                    x.push(xi);
                }
                ContractiveKind::NormalCdf => {
                    if !(*v > 0.0 && *v < 1.0) {
                        return Err(FlowError::OutOfDomain { what: "normal quantile", value: *v });
                    }
                    let xi = normal_quantile(*v);
                    logdet += 0.5 * (xi * xi + LN_2PI);
                    x.push(xi);
                }
            }
        }
        Ok((x, logdet))
    }

    fn backward(&self, x: &[f64], grad_out: &[f64], _grad_params: &mut [f64]) -> Result<Vec<f64>> {
        Ok(match self.kind {
            ContractiveKind::Tanh => x
                .iter()
                .zip(grad_out)
                .map(|(v, g)| {
                    let t = v.tanh();
                    g * (1.0 - t * t) - 2.0 * t
                })
                .collect(),
            ContractiveKind::NormalCdf => x.iter().zip(grad_out).map(|(v, g)| g * normal_pdf(*v) - v).collect(),
        })
    }
}

/// `y = theta * x` elementwise.
#[derive(Debug, Clone)]
pub struct ElementwiseScale {
    params: Vec<f64>,
}

impl ElementwiseScale {
    pub fn new(scale: Vec<f64>) -> Self {
        Self { params: scale }
    }

    fn check(&self) -> Result<()> {
        if self.params.iter().any(|s| *s == 0.0) {
            return Err(FlowError::NonInvertibleParams("zero scale".into()));
        }
        Ok(())
    }
}

impl Bijector for ElementwiseScale {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check()?;
        Ok((
            x.iter().zip(&self.params).map(|(a, s)| a * s).collect(),
            self.params.iter().map(|s| s.abs().ln()).sum(),
        ))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check()?;
        Ok((
            y.iter().zip(&self.params).map(|(a, s)| a / s).collect(),
            -self.params.iter().map(|s| s.abs().ln()).sum::<f64>(),
        ))
    }

    fn backward(&self, x: &[f64], grad_out: &[f64], grad_params: &mut [f64]) -> Result<Vec<f64>> {
        self.check()?;
        for i in 0..self.params.len() {
            grad_params[i] += grad_out[i] * x[i] + 1.0 / self.params[i];
        }
        Ok(grad_out.iter().zip(&self.params).map(|(g, s)| g * s).collect())
    }
}
