//! Multi-scale flow composition and exact likelihood.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{FlowError, Result};
use crate::exec::Exec;
use crate::flow::layer::{Bijector, Layer, Shape};
use crate::linalg::Matrix;
use crate::special::normal_log_pdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseDist {
    StandardNormal,
    /// Uniform on the open unit cube.
    Uniform,
}

impl BaseDist {
    pub fn name(self) -> &'static str {
        match self {
            BaseDist::StandardNormal => "normal",
            BaseDist::Uniform => "uniform",
        }
    }

    pub fn log_prob(self, z: &[f64]) -> Result<f64> {
        match self {
            BaseDist::StandardNormal => Ok(z.iter().map(|v| normal_log_pdf(*v)).sum()),
            BaseDist::Uniform => {
                if z.iter().all(|v| *v > 0.0 && *v < 1.0) {
                    Ok(0.0)
                } else {
                    Err(FlowError::OutOfSupport)
                }
            }
        }
    }

    /// `d log q / dz`.
    pub fn grad_log_prob(self, z: &[f64]) -> Vec<f64> {
        match self {
            BaseDist::StandardNormal => z.iter().map(|v| -v).collect(),
            BaseDist::Uniform => vec![0.0; z.len()],
        }
    }
}

/// One scale of the architecture: a run of layers followed by factoring out
/// the first `split` channels at every spatial position.
#[derive(Debug, Clone)]
pub struct Level {
    pub layers: Vec<Layer>,
    pub in_shape: Shape,
    pub out_shape: Shape,
    /// Channels factored out per position. Equals `out_shape.c` on the last level.
    pub split: usize,
}

impl Level {
    pub fn factored_dim(&self) -> usize {
        self.out_shape.positions() * self.split
    }

    pub fn remainder_shape(&self) -> Shape {
        Shape::new(self.out_shape.h, self.out_shape.w, self.out_shape.c - self.split)
    }
}

/// Splits an HWC tensor into the first `split` channels and the rest.
pub fn factor_channels(h: &[f64], shape: Shape, split: usize) -> (Vec<f64>, Vec<f64>) {
    let c = shape.c;
    let mut out = Vec::with_capacity(shape.positions() * split);
    let mut rest = Vec::with_capacity(shape.positions() * (c - split));
    for p in 0..shape.positions() {
        out.extend_from_slice(&h[p * c..p * c + split]);
        rest.extend_from_slice(&h[p * c + split..(p + 1) * c]);
    }
    (out, rest)
}

/// Inverse of [`factor_channels`].
pub fn merge_channels(out: &[f64], rest: &[f64], shape: Shape, split: usize) -> Vec<f64> {
    let c = shape.c;
    let keep = c - split;
    let mut h = Vec::with_capacity(shape.dim());
    for p in 0..shape.positions() {
        h.extend_from_slice(&out[p * split..(p + 1) * split]);
        h.extend_from_slice(&rest[p * keep..(p + 1) * keep]);
    }
    h
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    levels: Vec<Level>,
    base: BaseDist,
    shape: Shape,
}

/// Intermediate values of a single forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input of every layer, in global layer order.
    pub inputs: Vec<Vec<f64>>,
    /// Output of every layer, in global layer order.
    pub outputs: Vec<Vec<f64>>,
    pub logdets: Vec<f64>,
    /// Per-level latent chunks.
    pub latents: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn z(&self) -> Vec<f64> {
        self.latents.concat()
    }

    pub fn total_logdet(&self) -> f64 {
        self.logdets.iter().sum()
    }
}

/// Builds a multi-scale model. Each level is `(layers, split)`; the split of
/// the last level is ignored because everything left is factored out there.
pub fn multiscale_compose(levels: Vec<(Vec<Layer>, usize)>, shape: Shape, base: BaseDist) -> Result<FlowModel> {
    if levels.is_empty() {
        return Err(FlowError::Shape("a flow needs at least one level".into()));
    }
    let n = levels.len();
    let mut cur = shape;
    let mut built = Vec::with_capacity(n);
    for (i, (layers, split)) in levels.into_iter().enumerate() {
        let in_shape = cur;
        for layer in &layers {
            if layer.dim() != cur.dim() {
                return Err(FlowError::Shape(format!("layer `{}` expects {} inputs but level {i} carries {}", layer.kind().name(), layer.dim(), cur.dim())));
            }
            cur = layer.out_shape(cur);
        }
        let out_shape = cur;
        let split = if i + 1 == n {
            out_shape.c
        } else {
            if split == 0 || split >= out_shape.c {
                return Err(FlowError::BadSplit { split, channels: out_shape.c });
            }
            split
        };
        let level = Level { layers, in_shape, out_shape, split };
        cur = level.remainder_shape();
        built.push(level);
    }
    Ok(FlowModel { levels: built, base, shape })
}

impl FlowModel {
    /// A model without layers: `f` is the identity.
    pub fn identity(shape: Shape, base: BaseDist) -> Self {
        FlowModel { levels: vec![Level { layers: Vec::new(), in_shape: shape, out_shape: shape, split: shape.c }], base, shape }
    }

    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn base(&self) -> BaseDist {
        self.base
    }

    pub fn set_base(&mut self, base: BaseDist) {
        self.base = base;
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.levels.iter().flat_map(|l| l.layers.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.levels.iter_mut().flat_map(|l| l.layers.iter_mut())
    }

    pub fn num_layers(&self) -> usize {
        self.levels.iter().map(|l| l.layers.len()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.params().len()).sum()
    }

    pub fn layer_names(&self) -> Vec<&'static str> {
        self.layers().map(|l| l.kind().name()).collect()
    }

    /// Dimension entering each level.
    pub fn level_dims(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.in_shape.dim()).collect()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(FlowError::Shape(format!("model expects {} inputs, got {}", self.dim(), x.len())));
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite { index });
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate value.
    pub fn forward_pass(&self, x: &[f64]) -> Result<ForwardPass> {
        self.check_point(x)?;
        let n = self.num_layers();
        let mut pass = ForwardPass {
            inputs: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            logdets: Vec::with_capacity(n),
            latents: Vec::with_capacity(self.levels.len()),
        };
        let mut h = x.to_vec();
        for level in &self.levels {
            for layer in &level.layers {
                let (y, ld) = layer.forward(&h)?;
                pass.inputs.push(std::mem::replace(&mut h, y.clone()));
                pass.outputs.push(y);
                pass.logdets.push(ld);
            }
            let (out, rest) = factor_channels(&h, level.out_shape, level.split);
            pass.latents.push(out);
            h = rest;
        }
        Ok(pass)
    }

    /// `(z, log|det J_f(x)|)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (latents, ld) = self.encode(x)?;
        Ok((latents.concat(), ld))
    }

    /// Per-level latents and total log-determinant.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
        self.check_point(x)?;
        let mut h = x.to_vec();
        let mut logdet = 0.0;
        let mut latents = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            for layer in &level.layers {
                let (y, ld) = layer.forward(&h)?;
                h = y;
                logdet += ld;
            }
            let (out, rest) = factor_channels(&h, level.out_shape, level.split);
            latents.push(out);
            h = rest;
        }
        Ok((latents, logdet))
    }

    /// Splits a flat latent vector into per-level chunks.
    pub fn split_latent(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        if z.len() != self.dim() {
            return Err(FlowError::Shape(format!("latent must have {} entries, got {}", self.dim(), z.len())));
        }
        let mut off = 0;
        Ok(self
            .levels
            .iter()
            .map(|l| {
                let n = l.factored_dim();
                let chunk = z[off..off + n].to_vec();
                off += n;
                chunk
            })
            .collect())
    }

    /// `g = f^-1` applied to per-level latents; also returns `log|det J_f(x)|`.
    pub fn decode(&self, latents: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
        if latents.len() != self.levels.len() {
            return Err(FlowError::Shape(format!("expected {} latent chunks, got {}", self.levels.len(), latents.len())));
        }
        let mut h: Vec<f64> = Vec::new();
        let mut logdet = 0.0;
        for (level, chunk) in self.levels.iter().zip(latents).rev() {
            if chunk.len() != level.factored_dim() {
                return Err(FlowError::Shape("latent chunk has the wrong size".into()));
            }
            h = merge_channels(chunk, &h, level.out_shape, level.split);
            for layer in level.layers.iter().rev() {
                let (x, ld) = layer.inverse(&h)?;
                h = x;
                logdet -= ld;
            }
        }
        Ok((h, logdet))
    }

    /// `g(z)` for a flat latent.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode(&self.split_latent(z)?)?.0)
    }

    /// `log q(f(x)) + log|det J_f(x)|` in nats.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let (z, ld) = self.forward(x)?;
        Ok(self.base.log_prob(&z)? + ld)
    }

    /// Log-likelihood of every row.
    pub fn log_likelihood_batch(&self, data: &Matrix, exec: Exec) -> Result<Vec<f64>> {
        exec.map(data.rows(), |i| self.log_likelihood(data.row(i))).into_iter().collect()
    }

    /// Mean log-likelihood over the rows of `data`.
    pub fn mean_log_likelihood(&self, data: &Matrix, exec: Exec) -> Result<f64> {
        let ll = self.log_likelihood_batch(data, exec)?;
        Ok(ll.iter().sum::<f64>() / ll.len().max(1) as f64)
    }

    /// The sub-flow acting after level `level - 1`: it takes that level's
    /// output (before factoring), passes the factored channels through
    /// unchanged and runs the deeper levels on the rest. The result is laid
    /// out as `[factored, z_level, z_level+1, ...]`.
    pub fn sub_flow(&self, level: usize, h: &[f64]) -> Result<(Vec<f64>, f64)> {
        if level == 0 || level >= self.levels.len() {
            return Err(FlowError::Shape(format!("sub-flow level must lie in [1, {})", self.levels.len())));
        }
        let prev = &self.levels[level - 1];
        if h.len() != prev.out_shape.dim() {
            return Err(FlowError::Shape("sub-flow input has the wrong size".into()));
        }
        let (out, mut cur) = factor_channels(h, prev.out_shape, prev.split);
        let mut z = out;
        let mut logdet = 0.0;
        for lv in &self.levels[level..] {
            for layer in &lv.layers {
                let (y, ld) = layer.forward(&cur)?;
                cur = y;
                logdet += ld;
            }
            let (o, rest) = factor_channels(&cur, lv.out_shape, lv.split);
            z.extend(o);
            cur = rest;
        }
        Ok((z, logdet))
    }

    /// Draws per-level latents from the base at `temperature`.
    pub fn sample_latents(&self, rng: &mut ChaCha8Rng, temperature: f64) -> Vec<Vec<f64>> {
        self.levels
            .iter()
            .map(|l| (0..l.factored_dim()).map(|_| self.draw_base(rng, temperature)).collect())
            .collect()
    }

    pub(crate) fn draw_base(&self, rng: &mut ChaCha8Rng, temperature: f64) -> f64 {
        match self.base {
            BaseDist::StandardNormal => {
                let e: f64 = StandardNormal.sample(rng);
                temperature * e
            },
            BaseDist::Uniform => Uniform::new(f64::EPSILON, 1.0).expect("valid range").sample(rng),
        }
    }

    /// `n` samples `g(z)` with `z ~ N(0, temperature² I)`.
    pub fn sample(&self, n: usize, temperature: f64, seed: u64, exec: Exec) -> Result<Matrix> {
        if !(temperature > 0.0) {
            return Err(FlowError::OutOfDomain { what: "sampling temperature", value: temperature });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<Vec<Vec<f64>>> = (0..n).map(|_| self.sample_latents(&mut rng, temperature)).collect();
        let rows: Vec<Vec<f64>> = exec.map(n, |i| self.decode(&latents[i]).map(|r| r.0)).into_iter().collect::<Result<_>>()?;
        let d = self.dim();
        Matrix::new(n, d, rows.concat())
    }
}

/// Negative log-likelihood in bits per dimension for data dequantized to
/// the unit cube at `bit_depth` bits.
pub fn nll_bits_per_dim(nats: f64, d: usize, bit_depth: u32) -> f64 {
    -nats / (d as f64 * std::f64::consts::LN_2) + bit_depth as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::activation::ElementwiseScale;
    use crate::special::LN_2PI;

    #[test]
    fn empty_model_normal_base() {
        let m = FlowModel::identity(Shape::vector(2), BaseDist::StandardNormal);
        assert!((m.log_likelihood(&[0.0, 0.0]).unwrap() + LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn empty_model_uniform_base() {
        let m = FlowModel::identity(Shape::vector(2), BaseDist::Uniform);
        assert_eq!(m.log_likelihood(&[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(m.log_likelihood(&[1.3, 0.7]), Err(FlowError::OutOfSupport));
    }

    #[test]
    fn scale_layer_likelihood() {
        let layer = Layer::Scale(ElementwiseScale::new(vec![2.0]));
        let m = multiscale_compose(vec![(vec![layer], 0)], Shape::vector(1), BaseDist::StandardNormal).unwrap();
        let want = 2f64.ln() - 0.5 * LN_2PI;
        assert!((m.log_likelihood(&[0.0]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn bits_per_dim() {
        let d = 5;
        assert!((nll_bits_per_dim(-(d as f64) * 8.0 * 2f64.ln(), d, 8) - 16.0).abs() < 1e-12);
        assert_eq!(nll_bits_per_dim(0.0, 3, 8), 8.0);
        assert_eq!(nll_bits_per_dim(0.0, 7, 5), 5.0);
    }

    #[test]
    fn channel_factoring_round_trip() {
        let shape = Shape::new(2, 1, 3);
        let h = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (out, rest) = factor_channels(&h, shape, 2);
        assert_eq!(out, vec![1.0, 2.0, 4.0, 5.0]);
        assert_eq!(rest, vec![3.0, 6.0]);
        assert_eq!(merge_channels(&out, &rest, shape, 2), h.to_vec());
    }

    #[test]
    fn bad_split_rejected() {
        let levels = vec![(vec![], 4), (vec![], 1)];
        assert!(matches!(multiscale_compose(levels, Shape::vector(4), BaseDist::StandardNormal), Err(FlowError::BadSplit { .. })));
        let levels = vec![(vec![], 0), (vec![], 1)];
        assert!(multiscale_compose(levels, Shape::vector(4), BaseDist::StandardNormal).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = FlowModel::identity(Shape::vector(3), BaseDist::StandardNormal);
        let a = m.sample(50, 0.9, 7, Exec::default()).unwrap();
        let b = m.sample(50, 0.9, 7, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }
}
