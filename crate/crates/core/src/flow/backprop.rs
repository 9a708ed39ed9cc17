//! Reverse-mode gradient of the batch negative log-likelihood.
//!
//! The recursion runs from the latent back to the data. It is seeded with
//! `d log q / dz` (zero for the uniform base, `-z` for the normal base), and
//! every layer's `backward` contributes `J^T g` plus the gradient of its own
//! log-determinant.

use crate::error::{FlowError, Result};
use crate::exec::{Exec, CHUNK};
use crate::flow::layer::{Bijector, LayerKind};
use crate::flow::model::{merge_channels, FlowModel};
use crate::linalg::Matrix;

/// One gradient block per layer, shaped like that layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &FlowModel) -> Self {
        Self { layers: model.layers().map(|l| vec![0.0; l.params().len()]).collect() }
    }

    pub fn norms(&self) -> Vec<f64> {
        self.layers.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn add(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        self.layers.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BackpropOptions {
    /// Weight of the squared-displacement penalty on spline activation layers.
    pub l2_lambda: f64,
}

/// Per-layer batch statistics gathered during the forward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// Mean log-determinant of each layer.
    pub logdet: Vec<f64>,
    /// Variance of each layer's output, per dimension over the batch, then
    /// averaged over dimensions.
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BackpropOutput {
    /// Mean negative log-likelihood in nats.
    pub nll: f64,
    /// Mean transport penalty (zero unless enabled).
    pub penalty: f64,
    /// Gradient of `nll + penalty` with respect to every parameter.
    pub grads: GradientSet,
    pub stats: BatchStats,
}

/// Squared-displacement cost `lambda * mean ||h_out - h_in||²` over rows.
pub fn l2_transport_penalty(h_in: &Matrix, h_out: &Matrix, lambda: f64) -> f64 {
    if lambda == 0.0 || h_in.rows() == 0 {
        return 0.0;
    }
    let total: f64 = h_in.data().iter().zip(h_out.data()).map(|(a, b)| (b - a) * (b - a)).sum();
    lambda * total / h_in.rows() as f64
}

struct Accum {
    obj: f64,
    penalty: f64,
    grads: GradientSet,
    logdet: Vec<f64>,
    sum: Vec<Vec<f64>>,
    sumsq: Vec<Vec<f64>>,
}

impl Accum {
    fn new(model: &FlowModel) -> Self {
        let n = model.num_layers();
        let dims: Vec<usize> = model.layers().map(|l| l.dim()).collect();
        Accum {
            obj: 0.0,
            penalty: 0.0,
            grads: GradientSet::zeros_like(model),
            logdet: vec![0.0; n],
            sum: dims.iter().map(|d| vec![0.0; *d]).collect(),
            sumsq: dims.iter().map(|d| vec![0.0; *d]).collect(),
        }
    }

    fn merge(&mut self, other: &Accum) {
        self.obj += other.obj;
        self.penalty += other.penalty;
        self.grads.add(&other.grads);
        for l in 0..self.logdet.len() {
            self.logdet[l] += other.logdet[l];
            for (a, b) in self.sum[l].iter_mut().zip(&other.sum[l]) {
                *a += b;
            }
            for (a, b) in self.sumsq[l].iter_mut().zip(&other.sumsq[l]) {
                *a += b;
            }
        }
    }
}

/// Gradient of `log p(x) - penalty(x)` for a single point, accumulated into
/// `acc`.
fn point_backward(model: &FlowModel, x: &[f64], opts: &BackpropOptions, acc: &mut Accum) -> Result<()> {
    let pass = model.forward_pass(x)?;
    let z = pass.z();
    let logq = model.base().log_prob(&z)?;
    acc.obj += logq + pass.total_logdet();
    let g_z = model.base().grad_log_prob(&z);

    let kinds: Vec<LayerKind> = model.layers().map(|l| l.kind()).collect();
    for (l, out) in pass.outputs.iter().enumerate() {
        acc.logdet[l] += pass.logdets[l];
        for (i, v) in out.iter().enumerate() {
            acc.sum[l][i] += v;
            acc.sumsq[l][i] += v * v;
        }
    }

    let mut offsets = Vec::with_capacity(model.levels().len());
    let mut off = 0;
    for level in model.levels() {
        offsets.push(off);
        off += level.factored_dim();
    }
    let mut idx = model.num_layers();
    let mut g_rest: Vec<f64> = Vec::new();
    for (li, level) in model.levels().iter().enumerate().rev() {
        let chunk = &g_z[offsets[li]..offsets[li] + level.factored_dim()];
        let mut g = merge_channels(chunk, &g_rest, level.out_shape, level.split);
        for layer in level.layers.iter().rev() {
            idx -= 1;
            let penalized = opts.l2_lambda != 0.0 && kinds[idx] == LayerKind::RqActivation;
            let diff: Vec<f64> = if penalized {
                pass.outputs[idx].iter().zip(&pass.inputs[idx]).map(|(o, i)| o - i).collect()
            } else {
                Vec::new()
            };
            if penalized {
                acc.penalty += opts.l2_lambda * diff.iter().map(|v| v * v).sum::<f64>();
                for (gi, di) in g.iter_mut().zip(&diff) {
                    *gi -= 2.0 * opts.l2_lambda * di;
                }
            }
            let mut g_in = layer.backward(&pass.inputs[idx], &g, &mut acc.grads.layers[idx])?;
            if penalized {
                for (gi, di) in g_in.iter_mut().zip(&diff) {
                    *gi += 2.0 * opts.l2_lambda * di;
                }
            }
            g = g_in;
        }
        g_rest = g;
    }
    Ok(())
}

/// Mean negative log-likelihood of `batch` and its gradient.
pub fn backprop(model: &FlowModel, batch: &Matrix, opts: &BackpropOptions, exec: Exec) -> Result<BackpropOutput> {
    let n = batch.rows();
    if n == 0 {
        return Err(FlowError::Shape("empty batch".into()));
    }
    if batch.cols() != model.dim() {
        return Err(FlowError::Shape(format!("batch has {} columns, model expects {}", batch.cols(), model.dim())));
    }
    let partials = exec.map_chunks(n, CHUNK, |range| -> Result<Accum> {
        let mut acc = Accum::new(model);
        for i in range {
            point_backward(model, batch.row(i), opts, &mut acc)?;
        }
        Ok(acc)
    });
    let mut total = Accum::new(model);
    for p in partials {
        total.merge(&p?);
    }
    let inv = 1.0 / n as f64;
    let nll = -total.obj * inv;
    let penalty = total.penalty * inv;
    // the sweep produced d(log p - penalty); negate once for the NLL objective
    total.grads.scale(-inv);
    let variance = total
        .sum
        .iter()
        .zip(&total.sumsq)
        .map(|(s, q)| {
            let d = s.len().max(1) as f64;
            s.iter().zip(q).map(|(a, b)| (b * inv - (a * inv).powi(2)).max(0.0)).sum::<f64>() / d
        })
        .collect();
    let logdet = total.logdet.iter().map(|v| v * inv).collect();
    if !nll.is_finite() || !total.grads.is_finite() {
        return Err(FlowError::NonFiniteGradient);
    }
    Ok(BackpropOutput { nll, penalty, grads: total.grads, stats: BatchStats { logdet, variance } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::layer::{Layer, Shape};
    use crate::flow::model::{multiscale_compose, BaseDist};
    use crate::layers::activation::ElementwiseScale;

    #[test]
    fn empty_uniform_model_has_zero_gradient() {
        let m = FlowModel::identity(Shape::vector(2), BaseDist::Uniform);
        let batch = Matrix::from_rows(&[vec![0.2, 0.4], vec![0.6, 0.9]]).unwrap();
        let out = backprop(&m, &batch, &BackpropOptions::default(), Exec::Sequential).unwrap();
        assert!(out.grads.layers.is_empty());
        assert_eq!(out.nll, 0.0);
    }

    #[test]
    fn scale_layer_gradient_vanishes_at_optimum() {
        let layer = Layer::Scale(ElementwiseScale::new(vec![1.0]));
        let m = multiscale_compose(vec![(vec![layer], 0)], Shape::vector(1), BaseDist::StandardNormal).unwrap();
        let batch = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let out = backprop(&m, &batch, &BackpropOptions::default(), Exec::Sequential).unwrap();
        assert!(out.grads.layers[0][0].abs() < 1e-15);
        // at theta = 2: d log p / d theta = 1/2 - 2 = -1.5, so the NLL gradient is +1.5
        let layer = Layer::Scale(ElementwiseScale::new(vec![2.0]));
        let m = multiscale_compose(vec![(vec![layer], 0)], Shape::vector(1), BaseDist::StandardNormal).unwrap();
        let out = backprop(&m, &batch, &BackpropOptions::default(), Exec::Sequential).unwrap();
        assert!((out.grads.layers[0][0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn penalty_convention() {
        let a = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(l2_transport_penalty(&a, &b, 1.0), 2.0);
        assert_eq!(l2_transport_penalty(&a, &a, 1.0), 0.0);
        assert_eq!(l2_transport_penalty(&a, &b, 0.0), 0.0);
    }
}
