//! `key = value` run configuration and model construction.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FlowError, Result};
use crate::flow::backprop::BackpropOptions;
use crate::flow::layer::{Bijector, Layer, Shape};
use crate::flow::model::{multiscale_compose, BaseDist, FlowModel};
use crate::layers::activation::{Contractive, ContractiveKind, RqActivation};
use crate::layers::coupling::{DualCoupling, ScaleHead};
use crate::layers::init::block_init;
use crate::layers::inv_conv::InvConv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Multi-scale stack of conv / coupling / activation blocks.
    Flow,
    /// A single dense invertible matrix.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    InsertTanh,
    InsertNormalCdf,
    L2Transport,
    UnconstrainedScale,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::InsertTanh => "insert_tanh",
            Ablation::InsertNormalCdf => "insert_normal_cdf",
            Ablation::L2Transport => "l2_transport",
            Ablation::UnconstrainedScale => "unconstrained_scale",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "none" => Ablation::None,
            "insert_tanh" => Ablation::InsertTanh,
            "insert_normal_cdf" => Ablation::InsertNormalCdf,
            "l2_transport" => Ablation::L2Transport,
            "unconstrained_scale" => Ablation::UnconstrainedScale,
            _ => return Err(format!("unknown ablation `{s}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub shape: Shape,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub split_fraction: f64,
    pub k: usize,
    pub bins: usize,
    pub heads: usize,
    pub hidden: usize,
    pub beta: f64,
    pub act_width: f64,
    pub base: BaseDist,
    pub cdf_head: bool,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Flow,
            shape: Shape::vector(2),
            levels: 1,
            blocks_per_level: 2,
            split_fraction: 0.5,
            k: 1,
            bins: 16,
            heads: 4,
            hidden: 32,
            beta: 0.9,
            act_width: 3.0,
            base: BaseDist::StandardNormal,
            cdf_head: false,
            ablation: Ablation::None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_steps: f64,
    pub decay_rate: f64,
    pub l2_lambda: f64,
    pub seed: u64,
    /// Bit depth used when reporting bits/dim (0 for continuous data).
    pub bit_depth: u32,
    /// Steps between held-out evaluations (0 disables them).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 256,
            lr_start: 0.01,
            lr_end: 0.001,
            decay_steps: 1000.0,
            decay_rate: 0.98,
            l2_lambda: 0.0,
            seed: 0,
            bit_depth: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// `max(lr_end, lr_start * decay_rate^(t / decay_steps))`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        (self.lr_start * self.decay_rate.powf(step as f64 / self.decay_steps)).max(self.lr_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    /// Generator name, or `csv` / `image` to read `path`.
    pub name: String,
    pub n: usize,
    pub seed: u64,
    pub path: Option<String>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { name: "rings".into(), n: 10_000, seed: 1, path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub out_dir: Option<String>,
}

fn parse_shape(v: &str) -> std::result::Result<Shape, String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let nums: Vec<usize> = parts.iter().map(|p| p.parse::<usize>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    match nums.as_slice() {
        [d] if *d > 0 => Ok(Shape::vector(*d)),
        [h, w, c] if h * w * c > 0 => Ok(Shape::new(*h, *w, *c)),
        _ => Err(format!("bad shape `{v}` (expected `d` or `h,w,c`)")),
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("bad boolean `{v}`")),
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("bad value `{v}`: {e}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| FlowError::Config { line, msg: format!("expected `key = value`, got `{content}`") })?;
            cfg.set(key, value).map_err(|msg| FlowError::Config { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model" => {
                m.kind = match v {
                    "flow" => ModelKind::Flow,
                    "linear" => ModelKind::Linear,
                    _ => return Err(format!("unknown model kind `{v}`")),
                }
            }
            "shape" => m.shape = parse_shape(v)?,
            "levels" => m.levels = num(v)?,
            "blocks_per_level" => m.blocks_per_level = num(v)?,
            "split_fraction" => m.split_fraction = num(v)?,
            "k" => m.k = num(v)?,
            "bins" => m.bins = num(v)?,
            "heads" => m.heads = num(v)?,
            "hidden" => m.hidden = num(v)?,
            "beta" => m.beta = num(v)?,
            "act_width" => m.act_width = num(v)?,
            "base" => {
                m.base = match v {
                    "normal" => BaseDist::StandardNormal,
                    "uniform" => BaseDist::Uniform,
                    _ => return Err(format!("unknown base `{v}`")),
                }
            }
            "cdf_head" => m.cdf_head = parse_bool(v)?,
            "ablation" => m.ablation = v.parse()?,
            "seed" => {
                m.seed = num(v)?;
                t.seed = m.seed;
            }
            "steps" => t.steps = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "lr_start" => t.lr_start = num(v)?,
            "lr_end" => t.lr_end = num(v)?,
            "decay_steps" => t.decay_steps = num(v)?,
            "decay_rate" => t.decay_rate = num(v)?,
            "l2_lambda" => t.l2_lambda = num(v)?,
            "bit_depth" => t.bit_depth = num(v)?,
            "eval_every" => t.eval_every = num(v)?,
            "dataset" => self.data.name = v.to_string(),
            "n" => self.data.n = num(v)?,
            "data_seed" => self.data.seed = num(v)?,
            "data_path" => self.data.path = Some(v.to_string()),
            "out_dir" => self.out_dir = Some(v.to_string()),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FlowError::Config { line: 0, msg });
        let m = &self.model;
        let t = &self.train;
        if m.kind == ModelKind::Flow && m.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if !(m.beta > 0.0 && m.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", m.beta));
        }
        if m.kind == ModelKind::Flow && m.ablation != Ablation::UnconstrainedScale && m.beta < (-1.0f64).exp() {
            return bad(format!("beta must be at least 1/e with the Mexican-hat scale head, got {}", m.beta));
        }
        if !(m.split_fraction > 0.0 && m.split_fraction < 1.0) {
            return bad(format!("split_fraction must lie in (0, 1), got {}", m.split_fraction));
        }
        if m.bins == 0 || m.heads == 0 || m.hidden == 0 || m.k == 0 {
            return bad("bins, heads, hidden and k must be positive".into());
        }
        if !(m.act_width > 0.0) {
            return bad("act_width must be positive".into());
        }
        if t.batch_size == 0 || !(t.decay_steps > 0.0) || !(t.lr_start > 0.0) || t.lr_end < 0.0 || !(t.decay_rate > 0.0) {
            return bad("batch_size, decay_steps, decay_rate and lr_start must be positive".into());
        }
        if t.l2_lambda < 0.0 {
            return bad("l2_lambda must be non-negative".into());
        }
        if m.cdf_head && m.levels > 1 && m.kind == ModelKind::Flow {
            return bad("cdf_head is only supported with a single level".into());
        }
        Ok(())
    }

    /// Backprop options implied by the ablation: the transport penalty is
    /// only active under `ablation = l2_transport`.
    pub fn backprop_options(&self) -> BackpropOptions {
        let l2_lambda = if self.model.ablation == Ablation::L2Transport { self.train.l2_lambda } else { 0.0 };
        BackpropOptions { l2_lambda }
    }

    /// Fully resolved configuration as `key = value` lines; parsing the
    /// result reproduces `self`.
    pub fn to_kv(&self) -> String {
        let mut s = self.model.to_kv();
        let t = &self.train;
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr_start = {:?}", t.lr_start);
        let _ = writeln!(s, "lr_end = {:?}", t.lr_end);
        let _ = writeln!(s, "decay_steps = {:?}", t.decay_steps);
        let _ = writeln!(s, "decay_rate = {:?}", t.decay_rate);
        let _ = writeln!(s, "l2_lambda = {:?}", t.l2_lambda);
        let _ = writeln!(s, "bit_depth = {}", t.bit_depth);
        let _ = writeln!(s, "eval_every = {}", t.eval_every);
        let _ = writeln!(s, "dataset = {}", self.data.name);
        let _ = writeln!(s, "n = {}", self.data.n);
        let _ = writeln!(s, "data_seed = {}", self.data.seed);
        if let Some(p) = &self.data.path {
            let _ = writeln!(s, "data_path = {p}");
        }
        if let Some(o) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {o}");
        }
        s
    }
}

impl ModelConfig {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let kind = match self.kind {
            ModelKind::Flow => "flow",
            ModelKind::Linear => "linear",
        };
        let _ = writeln!(s, "model = {kind}");
        let _ = writeln!(s, "shape = {}", self.shape);
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "blocks_per_level = {}", self.blocks_per_level);
        let _ = writeln!(s, "split_fraction = {:?}", self.split_fraction);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "bins = {}", self.bins);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "beta = {:?}", self.beta);
        let _ = writeln!(s, "act_width = {:?}", self.act_width);
        let _ = writeln!(s, "base = {}", self.base.name());
        let _ = writeln!(s, "cdf_head = {}", self.cdf_head);
        let _ = writeln!(s, "ablation = {}", self.ablation.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Model-only keys from a config text (other keys are ignored).
    pub fn from_kv(text: &str) -> Result<Self> {
        Ok(RunConfig::parse(text)?.model)
    }

    /// Builds the model with blockwise volume-preserving initialization.
    pub fn build(&self) -> Result<FlowModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.kind {
            ModelKind::Linear => {
                let shape = Shape::vector(self.shape.dim());
                let conv = Layer::InvConv(InvConv::new(shape, 1)?);
                multiscale_compose(vec![(vec![conv], 0)], shape, self.base)
            }
            ModelKind::Flow => {
                let head = match self.ablation {
                    Ablation::UnconstrainedScale => ScaleHead::Exp,
                    _ => ScaleHead::MexicanHat { heads: self.heads },
                };
                let mut cur = self.shape;
                let mut levels = Vec::with_capacity(self.levels);
                for li in 0..self.levels {
                    let mut layers = Vec::new();
                    for b in 0..self.blocks_per_level {
                        let k = if b == 0 { self.k } else { 1 };
                        let conv = InvConv::new(cur, k)?;
                        cur = conv.out_shape(cur);
                        let d = cur.dim();
                        if d < 2 {
                            return Err(FlowError::Shape(format!("level {li} has only {d} dimension(s); a coupling needs two")));
                        }
                        let mut block = vec![
                            Layer::InvConv(conv),
                            Layer::DualCoupling(DualCoupling::new(d, d / 2, self.hidden, head, 0.0, &mut rng)?),
                        ];
                        match self.ablation {
                            Ablation::InsertTanh => block.push(Layer::Contractive(Contractive::new(ContractiveKind::Tanh, d))),
                            Ablation::InsertNormalCdf => block.push(Layer::Contractive(Contractive::new(ContractiveKind::NormalCdf, d))),
                            _ => {}
                        }
                        block.push(Layer::RqActivation(RqActivation::new(d, self.bins, self.beta, self.act_width)?));
                        block_init(&mut block, self.beta)?;
                        if let Some(Layer::RqActivation(a)) = block.last_mut() {
                            a.set_linear(self.beta, self.act_width);
                        }
                        layers.extend(block);
                    }
                    let split = ((self.split_fraction * cur.c as f64).round() as usize).max(1);
                    if li + 1 < self.levels {
                        if split >= cur.c {
                            return Err(FlowError::BadSplit { split, channels: cur.c });
                        }
                        cur = Shape::new(cur.h, cur.w, cur.c - split);
                    } else if self.cdf_head {
                        layers.push(Layer::Contractive(Contractive::new(ContractiveKind::NormalCdf, cur.dim())));
                    }
                    levels.push((layers, split));
                }
                multiscale_compose(levels, self.shape, self.base)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("levels = 2\n\n# note\nlevles = 3\n").unwrap_err();
        assert_eq!(err, FlowError::Config { line: 4, msg: "unknown key `levles`".into() });
    }

    #[test]
    fn bad_value_reports_line() {
        assert!(matches!(RunConfig::parse("beta = abc"), Err(FlowError::Config { line: 1, .. })));
    }

    #[test]
    fn echo_round_trip() {
        let cfg = RunConfig::parse("shape = 8,8,1\nlevels = 3\nk = 2\nsplit_fraction = 0.75\nbeta = 0.7\nablation = insert_tanh\nsteps = 12\ndata_path = a b.csv\n").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn schedule_is_continuous_and_floored() {
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate(0), 0.01);
        assert!((t.learning_rate(500) - 0.01 * 0.98f64.sqrt()).abs() < 1e-15);
        assert_eq!(t.learning_rate(10_000_000), 0.001);
    }

    #[test]
    fn three_level_dims() {
        let cfg = RunConfig::parse("shape = 8,8,1\nlevels = 3\nk = 2\nsplit_fraction = 0.75\nblocks_per_level = 1\nhidden = 4\nbins = 4").unwrap();
        let m = cfg.model.build().unwrap();
        assert_eq!(m.level_dims(), vec![64, 16, 4]);
    }

    #[test]
    fn fresh_model_is_identity() {
        let cfg = ModelConfig { beta: 0.6, ..ModelConfig::default() };
        let m = cfg.build().unwrap();
        let (z, ld) = m.forward(&[0.4, -1.1]).unwrap();
        assert!((z[0] - 0.4).abs() < 1e-12 && (z[1] + 1.1).abs() < 1e-12);
        assert!(ld.abs() < 1e-12);
    }
}
