//! Dual affine coupling.
//!
//! For a partition `x = (x1, x2)` with `x1` of length `r`:
//!
//! ```text
//! y1 = s1(x2) * x1 + t1(x2)
//! y2 = s2(y1) * x2 + t2(y1)
//! ```
//!
//! so every coordinate is transformed once per layer. Each `(s, t)` pair comes
//! from a small feed-forward conditioner whose scale output passes through a
//! mixture of Mexican-hat activations, which keeps `log s` inside
//! `[-2 e^{-3/2}, 1]` for any input.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FlowError, Result};
use crate::flow::layer::Bijector;
use crate::linalg::{dot, Matrix};

/// `(1 - p²) exp(-p²/2)`.
pub fn mexican_hat(p: f64) -> f64 {
    let p2 = p * p;
    (1.0 - p2) * (-0.5 * p2).exp()
}

pub fn mexican_hat_derivative(p: f64) -> f64 {
    let p2 = p * p;
    p * (p2 - 3.0) * (-0.5 * p2).exp()
}

/// Smallest value of [`mexican_hat`], attained at `p² = 3`.
pub fn mexican_hat_min() -> f64 {
    -2.0 * (-1.5f64).exp()
}

/// One Mexican-hat head: `phi_m = w_m phi + b_m`.
#[derive(Debug, Clone)]
pub struct HatHead {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// `s = exp((1/M) sum_m hat(w_m phi + b_m))`, elementwise.
pub fn mexican_hat_scale(phi: &[f64], heads: &[HatHead]) -> Vec<f64> {
    assert!(!heads.is_empty(), "at least one head is required");
    let n = heads[0].b.len();
    let mut log_s = vec![0.0; n];
    for head in heads {
        let pre = head.w.matvec(phi);
        for ((acc, p), b) in log_s.iter_mut().zip(pre).zip(&head.b) {
            *acc += mexican_hat(p + b);
        }
    }
    let m = heads.len() as f64;
    log_s.into_iter().map(|v| (v / m).exp()).collect()
}

/// Root `b*` in `[0, sqrt 3]` of `hat(b) = target`, by bisection.
///
/// `hat` decreases monotonically on that interval from 1 to its minimum, so any
/// target in `[hat_min, 1]` has exactly one root there.
pub fn mexican_hat_root(target: f64) -> f64 {
    if target == 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 3f64.sqrt());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mexican_hat(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleHead {
    /// Bounded mixture of Mexican-hat activations.
    MexicanHat { heads: usize },
    /// `log s` is the raw linear output. Only used by the unconstrained ablation.
    Exp,
}

/// Feed-forward conditioner: two tanh hidden layers, then a scale head and a
/// linear shift head. The network only describes a layout; its parameters
/// live in a flat slice owned by the coupling layer.
#[derive(Debug, Clone)]
pub struct ConditionerNet {
    pub n_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub head: ScaleHead,
}

/// Intermediate values of one conditioner evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NetPass {
    pub log_s: Vec<f64>,
    pub t: Vec<f64>,
    h1: Vec<f64>,
    phi: Vec<f64>,
    /// per-head pre-activations, head-major
    head_pre: Vec<f64>,
}

impl ConditionerNet {
    pub fn new(n_in: usize, hidden: usize, n_out: usize, head: ScaleHead) -> Self {
        Self { n_in, hidden, n_out, head }
    }

    fn scale_heads(&self) -> usize {
        match self.head {
            ScaleHead::MexicanHat { heads } => heads,
            ScaleHead::Exp => 1,
        }
    }

    // Layout: W1 b1 W2 b2 [Wm bm]*M Wt bt
    fn off_w1(&self) -> usize {
        0
    }
    fn off_b1(&self) -> usize {
        self.hidden * self.n_in
    }
    fn off_w2(&self) -> usize {
        self.off_b1() + self.hidden
    }
    fn off_b2(&self) -> usize {
        self.off_w2() + self.hidden * self.hidden
    }
    fn off_head(&self, m: usize) -> usize {
        self.off_b2() + self.hidden + m * (self.n_out * self.hidden + self.n_out)
    }
    fn off_t(&self) -> usize {
        self.off_head(self.scale_heads())
    }

    pub fn param_count(&self) -> usize {
        self.off_t() + self.n_out * self.hidden + self.n_out
    }

    /// Random hidden weights (variance 1/fan_in), zero head weights, zero
    /// shift, and every scale-head bias set to `head_bias`.
    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R, head_bias: f64) {
        p.iter_mut().for_each(|v| *v = 0.0);
        let s1 = (1.0 / self.n_in as f64).sqrt();
        for v in &mut p[self.off_w1()..self.off_b1()] {
            *v = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        let s2 = (1.0 / self.hidden as f64).sqrt();
        for v in &mut p[self.off_w2()..self.off_b2()] {
            *v = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        self.set_head_bias(p, head_bias);
    }

    pub fn set_head_bias(&self, p: &mut [f64], head_bias: f64) {
        for m in 0..self.scale_heads() {
            let b = self.off_head(m) + self.n_out * self.hidden;
            p[b..b + self.n_out].iter_mut().for_each(|v| *v = head_bias);
        }
    }

    /// Zeroes every head weight (scale and shift) and the shift bias.
    pub fn zero_heads(&self, p: &mut [f64]) {
        for m in 0..self.scale_heads() {
            let w = self.off_head(m);
            p[w..w + self.n_out * self.hidden].iter_mut().for_each(|v| *v = 0.0);
        }
        p[self.off_t()..self.param_count()].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn heads(&self, p: &[f64]) -> Vec<HatHead> {
        (0..self.scale_heads())
            .map(|m| {
                let o = self.off_head(m);
                let w = Matrix::from_raw(self.n_out, self.hidden, p[o..o + self.n_out * self.hidden].to_vec());
                let b = p[o + self.n_out * self.hidden..o + self.n_out * self.hidden + self.n_out].to_vec();
                HatHead { w, b }
            })
            .collect()
    }

    fn dense(p: &[f64], w_off: usize, b_off: usize, rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        (0..rows)
            .map(|r| dot(&p[w_off + r * cols..w_off + (r + 1) * cols], x) + p[b_off + r])
            .collect()
    }

    /// Hidden representation fed to the heads.
    pub fn features(&self, p: &[f64], v: &[f64]) -> Vec<f64> {
        let h1: Vec<f64> = Self::dense(p, self.off_w1(), self.off_b1(), self.hidden, self.n_in, v)
            .into_iter()
            .map(f64::tanh)
            .collect();
        Self::dense(p, self.off_w2(), self.off_b2(), self.hidden, self.hidden, &h1)
            .into_iter()
            .map(f64::tanh)
            .collect()
    }

    pub fn eval(&self, p: &[f64], v: &[f64]) -> NetPass {
        let (h, no) = (self.hidden, self.n_out);
        let h1: Vec<f64> = Self::dense(p, self.off_w1(), self.off_b1(), h, self.n_in, v)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let phi: Vec<f64> = Self::dense(p, self.off_w2(), self.off_b2(), h, h, &h1)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let heads = self.scale_heads();
        let mut head_pre = Vec::with_capacity(heads * no);
        for m in 0..heads {
            let o = self.off_head(m);
            head_pre.extend(Self::dense(p, o, o + no * h, no, h, &phi));
        }
        let log_s = match self.head {
            ScaleHead::MexicanHat { heads } => (0..no)
                .map(|j| (0..heads).map(|m| mexican_hat(head_pre[m * no + j])).sum::<f64>() / heads as f64)
                .collect(),
            ScaleHead::Exp => head_pre.clone(),
        };
        let t = Self::dense(p, self.off_t(), self.off_t() + no * h, no, h, &phi);
        NetPass { log_s, t, h1, phi, head_pre }
    }

    /// Backpropagates `g_log_s`, `g_t` through the net; accumulates parameter
    /// gradients and returns the gradient with respect to the input `v`.
    pub fn backward(&self, p: &[f64], v: &[f64], pass: &NetPass, g_log_s: &[f64], g_t: &[f64], gp: &mut [f64]) -> Vec<f64> {
        let (h, no) = (self.hidden, self.n_out);
        let mut g_phi = vec![0.0; h];
        let heads = self.scale_heads();
        for m in 0..heads {
            let o = self.off_head(m);
            for j in 0..no {
                let pre = pass.head_pre[m * no + j];
                let g = match self.head {
                    ScaleHead::MexicanHat { heads } => g_log_s[j] * mexican_hat_derivative(pre) / heads as f64,
                    ScaleHead::Exp => g_log_s[j],
                };
                if g == 0.0 {
                    continue;
                }
                let row = o + j * h;
                for k in 0..h {
                    gp[row + k] += g * pass.phi[k];
                    g_phi[k] += g * p[row + k];
                }
                gp[o + no * h + j] += g;
            }
        }
        let ot = self.off_t();
        for j in 0..no {
            let g = g_t[j];
            if g == 0.0 {
                continue;
            }
            let row = ot + j * h;
            for k in 0..h {
                gp[row + k] += g * pass.phi[k];
                g_phi[k] += g * p[row + k];
            }
            gp[ot + no * h + j] += g;
        }
        let g_a2: Vec<f64> = g_phi.iter().zip(&pass.phi).map(|(g, f)| g * (1.0 - f * f)).collect();
        let mut g_h1 = vec![0.0; h];
        let (w2, b2) = (self.off_w2(), self.off_b2());
        for (r, g) in g_a2.iter().enumerate() {
            for k in 0..h {
                gp[w2 + r * h + k] += g * pass.h1[k];
                g_h1[k] += g * p[w2 + r * h + k];
            }
            gp[b2 + r] += g;
        }
        let g_a1: Vec<f64> = g_h1.iter().zip(&pass.h1).map(|(g, a)| g * (1.0 - a * a)).collect();
        let mut g_v = vec![0.0; self.n_in];
        let (w1, b1) = (self.off_w1(), self.off_b1());
        for (r, g) in g_a1.iter().enumerate() {
            for k in 0..self.n_in {
                gp[w1 + r * self.n_in + k] += g * v[k];
                g_v[k] += g * p[w1 + r * self.n_in + k];
            }
            gp[b1 + r] += g;
        }
        g_v
    }
}

#[derive(Debug, Clone)]
pub struct DualCoupling {
    d: usize,
    r: usize,
    net1: ConditionerNet,
    net2: ConditionerNet,
    params: Vec<f64>,
}

impl DualCoupling {
    /// Builds the layer with randomly initialized hidden weights and zeroed
    /// heads; `head_bias` is written into every scale-head bias.
    pub fn new<R: Rng + ?Sized>(d: usize, r: usize, hidden: usize, head: ScaleHead, head_bias: f64, rng: &mut R) -> Result<Self> {
        if d < 2 || r == 0 || r >= d {
            return Err(FlowError::Shape(format!("coupling split r={r} must lie in [1, {d})")));
        }
        if hidden == 0 {
            return Err(FlowError::Shape("conditioner needs at least one hidden unit".into()));
        }
        if let ScaleHead::MexicanHat { heads: 0 } = head {
            return Err(FlowError::Shape("at least one Mexican-hat head is required".into()));
        }
        let net1 = ConditionerNet::new(d - r, hidden, r, head);
        let net2 = ConditionerNet::new(r, hidden, d - r, head);
        let mut params = vec![0.0; net1.param_count() + net2.param_count()];
        let n1 = net1.param_count();
        net1.init(&mut params[..n1], rng, head_bias);
        net2.init(&mut params[n1..], rng, head_bias);
        Ok(Self { d, r, net1, net2, params })
    }

    pub fn split(&self) -> usize {
        self.r
    }

    pub fn nets(&self) -> (&ConditionerNet, &ConditionerNet) {
        (&self.net1, &self.net2)
    }

    pub fn head(&self) -> ScaleHead {
        self.net1.head
    }

    fn p1(&self) -> &[f64] {
        &self.params[..self.net1.param_count()]
    }

    fn p2(&self) -> &[f64] {
        &self.params[self.net1.param_count()..]
    }

    pub fn set_head_bias(&mut self, bias: f64) {
        let n1 = self.net1.param_count();
        let (a, b) = self.params.split_at_mut(n1);
        self.net1.set_head_bias(a, bias);
        self.net2.set_head_bias(b, bias);
    }

    pub fn zero_heads(&mut self) {
        let n1 = self.net1.param_count();
        let (a, b) = self.params.split_at_mut(n1);
        self.net1.zero_heads(a);
        self.net2.zero_heads(b);
    }

    /// The two scale vectors `(s1, s2)` produced for input `x`.
    pub fn scales(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (x1, x2) = x.split_at(self.r);
        let a = self.net1.eval(self.p1(), x2);
        let y1: Vec<f64> = (0..self.r).map(|i| a.log_s[i].exp() * x1[i] + a.t[i]).collect();
        let b = self.net2.eval(self.p2(), &y1);
        (a.log_s.iter().map(|v| v.exp()).collect(), b.log_s.iter().map(|v| v.exp()).collect())
    }
}

impl Bijector for DualCoupling {
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
        let (x1, x2) = x.split_at(self.r);
        let a = self.net1.eval(self.p1(), x2);
        let mut y: Vec<f64> = (0..self.r).map(|i| a.log_s[i].exp() * x1[i] + a.t[i]).collect();
        let b = self.net2.eval(self.p2(), &y);
        y.extend((0..self.d - self.r).map(|i| b.log_s[i].exp() * x2[i] + b.t[i]));
        let logdet = a.log_s.iter().sum::<f64>() + b.log_s.iter().sum::<f64>();
        Ok((y, logdet))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (y1, y2) = y.split_at(self.r);
        let b = self.net2.eval(self.p2(), y1);
        let x2: Vec<f64> = (0..self.d - self.r).map(|i| (y2[i] - b.t[i]) * (-b.log_s[i]).exp()).collect();
        let a = self.net1.eval(self.p1(), &x2);
        let mut x: Vec<f64> = (0..self.r).map(|i| (y1[i] - a.t[i]) * (-a.log_s[i]).exp()).collect();
        x.extend(x2);
        let logdet = a.log_s.iter().sum::<f64>() + b.log_s.iter().sum::<f64>();
        Ok((x, -logdet))
    }

    fn backward(&self, x: &[f64], grad_out: &[f64], grad_params: &mut [f64]) -> Result<Vec<f64>> {
        let r = self.r;
        let (x1, x2) = x.split_at(r);
        let (gy1, gy2) = grad_out.split_at(r);
        let a = self.net1.eval(self.p1(), x2);
        let s1: Vec<f64> = a.log_s.iter().map(|v| v.exp()).collect();
        let y1: Vec<f64> = (0..r).map(|i| s1[i] * x1[i] + a.t[i]).collect();
        let b = self.net2.eval(self.p2(), &y1);
        let s2: Vec<f64> = b.log_s.iter().map(|v| v.exp()).collect();

        let n1 = self.net1.param_count();
        let (gp1, gp2) = grad_params.split_at_mut(n1);

        // second coupling: y2 = s2(y1) * x2 + t2(y1)
        let mut gx2: Vec<f64> = gy2.iter().zip(&s2).map(|(g, s)| g * s).collect();
        let g_ls2: Vec<f64> = (0..self.d - r).map(|i| gy2[i] * s2[i] * x2[i] + 1.0).collect();
        let g_y1_from_net = self.net2.backward(self.p2(), &y1, &b, &g_ls2, gy2, gp2);
        let gy1_total: Vec<f64> = gy1.iter().zip(&g_y1_from_net).map(|(a, b)| a + b).collect();

        // first coupling: y1 = s1(x2) * x1 + t1(x2)
        let gx1: Vec<f64> = gy1_total.iter().zip(&s1).map(|(g, s)| g * s).collect();
        let g_ls1: Vec<f64> = (0..r).map(|i| gy1_total[i] * s1[i] * x1[i] + 1.0).collect();
        let g_x2_from_net = self.net1.backward(self.p1(), x2, &a, &g_ls1, &gy1_total, gp1);
        for (g, extra) in gx2.iter_mut().zip(g_x2_from_net) {
            *g += extra;
        }
        let mut gx = gx1;
        gx.extend(gx2);
        Ok(gx)
    }
}
