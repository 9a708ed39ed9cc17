//! Closed-form likelihood optima for quasi-linear flows, and Jacobian audits.

use crate::error::{FlowError, Result};
use crate::flow::model::nll_bits_per_dim;
use crate::linalg::{invert, plu_logabsdet, spectral_norm, sym_eig, Matrix};
use crate::special::LN_2PI;
use crate::training::trace::TrainTrace;

/// Default eigenvalue floor.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMode {
    PerPoint,
    Covariance,
}

impl BoundMode {
    pub fn name(self) -> &'static str {
        match self {
            BoundMode::PerPoint => "per_point",
            BoundMode::Covariance => "covariance",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QlfBoundReport {
    pub lmax_nats: f64,
    pub lmax_bpd: f64,
    pub d: usize,
    /// Floored covariance eigenvalues; empty in per-point mode.
    pub eigenvalues: Vec<f64>,
    pub floored: usize,
    pub epsilon_floor: f64,
    pub mode: BoundMode,
}

impl QlfBoundReport {
    /// Same report with bits/dim taken at `bit_depth`.
    pub fn with_bit_depth(mut self, bit_depth: u32) -> Self {
        self.lmax_bpd = nll_bits_per_dim(self.lmax_nats, self.d, bit_depth);
        self
    }

    pub fn to_kv(&self) -> String {
        format!(
            "mode = {}\nlmax_nats = {:.10}\nlmax_bpd = {:.10}\nfloored = {}\nepsilon_floor = {:e}\n",
            self.mode.name(),
            self.lmax_nats,
            self.lmax_bpd,
            self.floored,
            self.epsilon_floor
        )
    }
}

fn lmax_from_eigs(d: usize, eigs: &[f64]) -> f64 {
    -0.5 * (d as f64 * LN_2PI + d as f64 + eigs.iter().map(|l| l.ln()).sum::<f64>())
}

fn floor_eigs(values: &[f64], eps: f64) -> (Vec<f64>, usize) {
    let floored = values.iter().filter(|v| **v < eps).count();
    (values.iter().map(|v| v.max(eps)).collect(), floored)
}

/// Maximum log-likelihood of a single point under the per-point
/// auto-correlation `x xᵀ`, eigenvalues floored at `eps`.
pub fn qlf_lmax_per_point(x: &[f64], eps: f64) -> f64 {
    let (v, _) = per_point_eigs(x, eps);
    lmax_from_eigs(x.len(), &v)
}

fn per_point_eigs(x: &[f64], eps: f64) -> (Vec<f64>, usize) {
    // x xᵀ has the single nonzero eigenvalue ||x||²
    let mut values = vec![0.0; x.len()];
    if let Some(first) = values.first_mut() {
        *first = x.iter().map(|v| v * v).sum();
    }
    floor_eigs(&values, eps)
}

/// Mean of [`qlf_lmax_per_point`] over the rows of `data`.
pub fn qlf_per_point_report(data: &Matrix, eps: f64) -> Result<QlfBoundReport> {
    if data.rows() == 0 {
        return Err(FlowError::DegenerateData);
    }
    let d = data.cols();
    let mut total = 0.0;
    let mut floored = 0;
    for r in 0..data.rows() {
        let (v, f) = per_point_eigs(data.row(r), eps);
        total += lmax_from_eigs(d, &v);
        floored += f;
    }
    let lmax = total / data.rows() as f64;
    Ok(QlfBoundReport {
        lmax_nats: lmax,
        lmax_bpd: nll_bits_per_dim(lmax, d, 0),
        d,
        eigenvalues: Vec::new(),
        floored,
        epsilon_floor: eps,
        mode: BoundMode::PerPoint,
    })
}

/// Centered sample covariance (divided by `N`).
pub fn sample_covariance(data: &Matrix) -> Matrix {
    let (n, d) = (data.rows(), data.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut s = vec![0.0; d * d];
    for r in 0..n {
        let row = data.row(r);
        for i in 0..d {
            let a = row[i] - mean[i];
            for j in i..d {
                s[i * d + j] += a * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = s[i * d + j] / n as f64;
            s[i * d + j] = v;
            s[j * d + i] = v;
        }
    }
    Matrix::from_raw(d, d, s)
}

/// Likelihood optimum over all linear flows, from the eigenvalues of the
/// centered sample covariance.
pub fn ppca_lmax(data: &Matrix, eps: f64) -> Result<QlfBoundReport> {
    if data.rows() < 2 {
        return Err(FlowError::Shape("at least two points are needed".into()));
    }
    let d = data.cols();
    let eig = sym_eig(&sample_covariance(data))?;
    let (values, floored) = floor_eigs(&eig.values, eps);
    if floored == d {
        return Err(FlowError::DegenerateData);
    }
    let lmax = lmax_from_eigs(d, &values);
    Ok(QlfBoundReport {
        lmax_nats: lmax,
        lmax_bpd: nll_bits_per_dim(lmax, d, 0),
        d,
        eigenvalues: values,
        floored,
        epsilon_floor: eps,
        mode: BoundMode::Covariance,
    })
}

/// `W = U Λ^{-1/2} Vᵀ` where `S = V Λ Vᵀ`; eigenvalues are floored at
/// [`DEFAULT_EPS`].
pub fn qlf_stationary_w(s: &Matrix, u: &Matrix) -> Result<Matrix> {
    let d = s.rows();
    if !s.is_square() || u.rows() != d || !u.is_square() {
        return Err(FlowError::Shape("S and U must be square and of equal size".into()));
    }
    let dev = u.transpose().matmul(u).sub(&Matrix::identity(d)).frobenius_norm();
    if dev > 1e-8 {
        return Err(FlowError::NotOrthogonal(dev));
    }
    let eig = sym_eig(s)?;
    let (values, _) = floor_eigs(&eig.values, DEFAULT_EPS);
    let inv_sqrt: Vec<f64> = values.iter().map(|l| 1.0 / l.sqrt()).collect();
    let mut scaled_vt = eig.vectors.transpose();
    for (r, f) in inv_sqrt.iter().enumerate() {
        for c in 0..d {
            scaled_vt[(r, c)] *= f;
        }
    }
    Ok(u.matmul(&scaled_vt))
}

/// `dL/dW = -W Sᵀ + (W^{-1})ᵀ`.
pub fn qlf_gradient(w: &Matrix, s: &Matrix) -> Result<Matrix> {
    let inv_t = invert(w)?.transpose();
    Ok(inv_t.sub(&w.matmul(&s.transpose())))
}

/// `-½ (d log 2π + tr(W S Wᵀ)) + log|det W|`.
pub fn qlf_objective(w: &Matrix, s: &Matrix) -> Result<f64> {
    let d = w.rows() as f64;
    let tr = w.matmul(s).matmul(&w.transpose()).trace();
    Ok(-0.5 * (d * LN_2PI + tr) + plu_logabsdet(w)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HadamardReport {
    pub det: f64,
    pub col_bound: f64,
    pub spec_bound: f64,
    pub ok: bool,
}

/// Checks `|det J| <= prod ||col_i(J)|| <= ||J||_2^d`.
pub fn hadamard_audit(j: &Matrix) -> HadamardReport {
    let d = j.rows() as i32;
    let det = match plu_logabsdet(j) {
        Ok((l, s)) => s * l.exp(),
        Err(_) => 0.0,
    };
    let col_bound: f64 = j.column_norms().iter().product();
    let spec = spectral_norm(j, 1e-12, 100_000).value;
    let spec_bound = spec.powi(d);
    let ok = det.abs() <= col_bound + 1e-12 && col_bound <= spec_bound * (1.0 + 1e-12);
    HadamardReport { det, col_bound, spec_bound, ok }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Row {
    pub step: usize,
    /// Sum of the log-determinants of every layer after the audited one.
    pub downstream_logdet: f64,
    pub grad_norm: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub layer: usize,
    pub threshold: f64,
    pub rows: Vec<Prop1Row>,
    pub first_flag: Option<usize>,
}

impl Prop1Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,downstream_logdet,grad_norm,flagged\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.downstream_logdet, r.grad_norm, u8::from(r.flagged)));
        }
        s
    }
}

/// Default flag threshold in nats.
pub const DEFAULT_PROP1_THRESHOLD: f64 = 5.0;

/// Places the downstream log-determinant next to the audited layer's
/// gradient norm at every step and flags steps where the former exceeds
/// `threshold`.
pub fn prop1_audit(trace: &TrainTrace, layer_index: usize, threshold: f64) -> Result<Prop1Report> {
    if trace.rows.is_empty() {
        return Err(FlowError::EmptyTrace);
    }
    let n_layers = trace.layer_names.len();
    if layer_index >= n_layers {
        return Err(FlowError::Shape(format!("layer {layer_index} out of range (trace has {n_layers})")));
    }
    let rows: Vec<Prop1Row> = trace
        .rows
        .iter()
        .map(|r| {
            let downstream_logdet: f64 = r.logdet[layer_index + 1..].iter().sum();
            Prop1Row { step: r.step, downstream_logdet, grad_norm: r.grad_norm[layer_index], flagged: downstream_logdet > threshold }
        })
        .collect();
    let first_flag = rows.iter().find(|r| r.flagged).map(|r| r.step);
    Ok(Prop1Report { layer: layer_index, threshold, rows, first_flag })
}
