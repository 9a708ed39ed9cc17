use std::fmt;

use crate::error::{FlowError, Result};
use crate::layers::activation::{Contractive, ElementwiseScale, RqActivation};
use crate::layers::coupling::DualCoupling;
use crate::layers::inv_conv::InvConv;

/// Tensor shape in height x width x channels order. Flat vectors use HWC layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    /// A plain vector of length `d`.
    pub const fn vector(d: usize) -> Self {
        Self { h: 1, w: 1, c: d }
    }

    pub const fn dim(&self) -> usize {
        self.h * self.w * self.c
    }

    pub const fn positions(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// One invertible map `f_l` with its parameter block `theta_l`.
///
/// `backward` is the per-layer step of the reverse recursion: given the input
/// `x` and `g = d obj / d y` for `y = f(x)`, it returns
/// `J_f(x)^T g + d log|det J_f(x)| / dx` and adds
/// `(dy/dtheta)^T g + d log|det J_f(x)| / dtheta` into `grad_params`.
pub trait Bijector {
    fn dim(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// `(f(x), log|det J_f(x)|)`.
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)>;

    /// `(f^-1(y), -log|det J_f(f^-1(y))|)`.
    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)>;

    fn backward(&self, x: &[f64], grad_out: &[f64], grad_params: &mut [f64]) -> Result<Vec<f64>>;

    fn out_shape(&self, input: Shape) -> Shape {
        input
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    InvConv,
    DualCoupling,
    RqActivation,
    Tanh,
    NormalCdf,
    Scale,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::InvConv => "inv_conv",
            LayerKind::DualCoupling => "dual_coupling",
            LayerKind::RqActivation => "rq_activation",
            LayerKind::Tanh => "tanh",
            LayerKind::NormalCdf => "normal_cdf",
            LayerKind::Scale => "scale",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    InvConv(InvConv),
    DualCoupling(DualCoupling),
    RqActivation(RqActivation),
    Contractive(Contractive),
    Scale(ElementwiseScale),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            Layer::InvConv($l) => $body,
            Layer::DualCoupling($l) => $body,
            Layer::RqActivation($l) => $body,
            Layer::Contractive($l) => $body,
            Layer::Scale($l) => $body,
        }
    };
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::InvConv(_) => LayerKind::InvConv,
            Layer::DualCoupling(_) => LayerKind::DualCoupling,
            Layer::RqActivation(_) => LayerKind::RqActivation,
            Layer::Contractive(c) => c.kind(),
            Layer::Scale(_) => LayerKind::Scale,
        }
    }

    pub fn apply(&self, direction: Direction, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        match direction {
            Direction::Forward => self.forward(x),
            Direction::Inverse => self.inverse(x),
        }
    }
}

impl Bijector for Layer {
    fn dim(&self) -> usize {
        dispatch!(self, l => l.dim())
    }

    fn params(&self) -> &[f64] {
        dispatch!(self, l => l.params())
    }

    fn params_mut(&mut self) -> &mut [f64] {
        dispatch!(self, l => l.params_mut())
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_input(self.dim(), x)?;
        dispatch!(self, l => l.forward(x))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_input(self.dim(), y)?;
        dispatch!(self, l => l.inverse(y))
    }

    fn backward(&self, x: &[f64], grad_out: &[f64], grad_params: &mut [f64]) -> Result<Vec<f64>> {
        check_input(self.dim(), x)?;
        if grad_out.len() != x.len() || grad_params.len() != self.params().len() {
            return Err(FlowError::Shape("gradient buffers do not match the layer".into()));
        }
        dispatch!(self, l => l.backward(x, grad_out, grad_params))
    }

    fn out_shape(&self, input: Shape) -> Shape {
        dispatch!(self, l => l.out_shape(input))
    }
}

fn check_input(dim: usize, x: &[f64]) -> Result<()> {
    if x.len() != dim {
        return Err(FlowError::Shape(format!("layer expects {dim} inputs, got {}", x.len())));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite { index });
    }
    Ok(())
}

/// Applies one layer in the requested direction.
pub fn layer_apply(layer: &Layer, direction: Direction, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    layer.apply(direction, x)
}
