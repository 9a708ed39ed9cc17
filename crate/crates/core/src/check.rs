//! Built-in invariant suite and model fixtures.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ModelConfig, ModelKind, TrainConfig};
use crate::exec::Exec;
use crate::flow::backprop::{backprop, BackpropOptions};
use crate::flow::layer::{Bijector, Layer, LayerKind, Shape};
use crate::flow::model::FlowModel;
use crate::flow::numeric::{fd_step, numeric_jacobian_auto, numeric_logdet};
use crate::layers::activation::{Contractive, ContractiveKind, ElementwiseScale, RqActivation};
use crate::layers::coupling::{mexican_hat, mexican_hat_min, mexican_hat_scale, DualCoupling, HatHead, ScaleHead};
use crate::layers::inv_conv::InvConv;
use crate::layers::modality::local_maxima_count;
use crate::layers::spline::KnotSet;
use crate::linalg::{sym_eig, Matrix};
use crate::qlf::{hadamard_audit, ppca_lmax, qlf_gradient, qlf_stationary_w, DEFAULT_EPS};
use crate::training::data::{correlated_gaussian, split_heldout, toy_dataset};
use crate::training::trainer::train;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Moves every parameter away from its initialization: convolution weights
/// become `I + scale N(0,1)`, coupling parameters get `scale N(0,1)` added,
/// and spline parameters are redrawn from `N(0,1)` around the current box.
pub fn randomize_model(model: &mut FlowModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in model.layers_mut() {
        randomize_layer(layer, &mut rng, scale);
    }
}

fn randomize_layer(layer: &mut Layer, rng: &mut ChaCha8Rng, scale: f64) {
    match layer {
        Layer::InvConv(_) | Layer::DualCoupling(_) | Layer::Scale(_) => {
            for v in layer.params_mut() {
                *v += scale * normal(rng);
            }
        }
        Layer::RqActivation(a) => {
            let width = a.knots(0).map(|k| k.box_scale()).unwrap_or(3.0);
            a.randomize(rng, 1.0, width);
        }
        Layer::Contractive(_) => {}
    }
}

/// The proposed flow on a `d`-vector: `blocks` blocks of
/// conv / coupling / spline activation in a single level.
pub fn proposed_config(d: usize, blocks: usize, bins: usize, heads: usize, hidden: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Flow,
        shape: Shape::vector(d),
        levels: 1,
        blocks_per_level: blocks,
        bins,
        heads,
        hidden,
        seed,
        ..ModelConfig::default()
    }
}

/// A proposed-flow model with randomized parameters.
pub fn random_proposed_model(d: usize, blocks: usize, bins: usize, heads: usize, hidden: usize, seed: u64) -> FlowModel {
    let mut m = proposed_config(d, blocks, bins, heads, hidden, seed).build().expect("valid fixture config");
    randomize_model(&mut m, seed.wrapping_add(1), 0.3);
    m
}

/// `n` standard-normal rows of length `d`.
pub fn normal_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect()
}

/// Every layer kind, in a fixed order.
pub const ALL_KINDS: [LayerKind; 6] = [LayerKind::InvConv, LayerKind::DualCoupling, LayerKind::RqActivation, LayerKind::Tanh, LayerKind::NormalCdf, LayerKind::Scale];

/// A randomly parameterized layer of the given kind acting on `d` inputs.
/// Convolutions with even `d >= 4` use a 2x2 squeeze over a `2 x 2 x d/4`
/// or `2 x 1 x d/2` image.
pub fn random_layer(kind: LayerKind, d: usize, seed: u64) -> Layer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = match kind {
        LayerKind::InvConv => {
            let conv = if d % 4 == 0 && seed % 2 == 0 {
                InvConv::new(Shape::new(2, 2, d / 4), 2)
            } else {
                InvConv::new(Shape::vector(d), 1)
            };
            Layer::InvConv(conv.expect("valid shape"))
        }
        LayerKind::DualCoupling => {
            let head = if seed % 3 == 0 { ScaleHead::Exp } else { ScaleHead::MexicanHat { heads: 1 + (seed % 4) as usize } };
            let r = rng.random_range(1..d);
            Layer::DualCoupling(DualCoupling::new(d, r, 6, head, 0.2, &mut rng).expect("valid coupling"))
        }
        LayerKind::RqActivation => Layer::RqActivation(RqActivation::new(d, 6, 0.8, 2.0).expect("valid activation")),
        LayerKind::Tanh => Layer::Contractive(Contractive::new(ContractiveKind::Tanh, d)),
        LayerKind::NormalCdf => Layer::Contractive(Contractive::new(ContractiveKind::NormalCdf, d)),
        LayerKind::Scale => Layer::Scale(ElementwiseScale::new((0..d).map(|_| uniform(&mut rng, 0.3, 2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())),
    };
    if kind != LayerKind::Scale {
        randomize_layer(&mut layer, &mut rng, 0.3);
    }
    layer
}

/// Outcome of one property of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub results: Vec<PropertyResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn first_failure(&self) -> Option<&PropertyResult> {
        self.results.iter().find(|r| !r.passed)
    }

    /// Fixed-width table, one property per line.
    pub fn table(&self) -> String {
        let mut s = format!("{:<22} {:<6} {:>8}  {}\n", "property", "result", "seconds", "detail");
        for r in &self.results {
            s += &format!("{:<22} {:<6} {:>8.2}  {}\n", r.name, if r.passed { "PASS" } else { "FAIL" }, r.seconds, r.detail);
        }
        s
    }
}

/// Budgets of the suite. `full()` runs the stated sizes; `quick()` is a
/// smoke run with small budgets.
#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub gradient_seeds: u64,
    pub logdet_seeds: u64,
    pub train_steps: usize,
    pub qlf_samples: usize,
    pub qlf_steps: usize,
    pub stationary_trials: u64,
    pub hadamard_trials: u64,
    pub spline_seeds: u64,
    pub spline_grid: usize,
    pub hat_inputs: usize,
    /// Injects NaN into one spline's `theta_x`; a negative control.
    pub corrupt_knots: bool,
    pub exec: Exec,
}

impl SuiteOptions {
    pub fn full() -> Self {
        Self {
            gradient_seeds: 20,
            logdet_seeds: 50,
            train_steps: 5000,
            qlf_samples: 100_000,
            qlf_steps: 3000,
            stationary_trials: 100,
            hadamard_trials: 1000,
            spline_seeds: 50,
            spline_grid: 10_000,
            hat_inputs: 1_000_000,
            corrupt_knots: false,
            exec: Exec::default(),
        }
    }

    pub fn quick() -> Self {
        Self {
            gradient_seeds: 2,
            logdet_seeds: 5,
            train_steps: 50,
            qlf_samples: 20_000,
            qlf_steps: 1500,
            stationary_trials: 10,
            hadamard_trials: 60,
            spline_seeds: 5,
            spline_grid: 2000,
            hat_inputs: 20_000,
            ..Self::full()
        }
    }
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self::full()
    }
}

pub const GRADIENT_TOL: f64 = 1e-5;
/// Denominator floor of the gradient relative error.
pub const GRADIENT_FLOOR: f64 = 1e-3;
pub const LOGDET_TOL: f64 = 1e-6;
pub const INIT_ROUND_TRIP_TOL: f64 = 1e-8;
pub const TRAINED_ROUND_TRIP_TOL: f64 = 1e-6;
pub const BLOCK_INIT_TOL: f64 = 1e-9;
pub const QLF_GAP_TOL: f64 = 1e-2;
pub const QLF_EXCESS_TOL: f64 = 1e-6;
pub const STATIONARY_TOL: f64 = 1e-10;
pub const HADAMARD_SLACK: f64 = 1e-12;
pub const SPLINE_ROUND_TRIP_TOL: f64 = 1e-10;
pub const SPLINE_CONTINUITY_TOL: f64 = 1e-9;
pub const SPLINE_SLOPE_SLACK: f64 = 1e-12;
pub const SPLINE_LINEAR_TOL: f64 = 1e-12;
pub const HAT_EXTREMA_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, GRADIENT_FLOOR)`.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

fn max_nan(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn within(v: f64, tol: f64) -> bool {
    v <= tol
}

/// Worst gradient relative error of a randomized 2-block model (d=4, I=8, M=4).
pub fn gradient_check_seed(seed: u64) -> f64 {
    let model = random_proposed_model(4, 2, 8, 4, 8, seed);
    let batch = Matrix::from_rows(&normal_points(8, 4, seed.wrapping_add(1000))).expect("rectangular");
    let out = match backprop(&model, &batch, &BackpropOptions::default(), Exec::Sequential) {
        Ok(o) => o,
        Err(_) => return f64::NAN,
    };
    let nll = |m: &FlowModel| m.mean_log_likelihood(&batch, Exec::Sequential).map(|v| -v).unwrap_or(f64::NAN);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (li, g_layer) in out.grads.layers.iter().enumerate() {
        for (pi, g) in g_layer.iter().enumerate() {
            let v = probe.layers().nth(li).expect("layer").params()[pi];
            let h = fd_step(v);
            let set = |m: &mut FlowModel, x: f64| m.layers_mut().nth(li).expect("layer").params_mut()[pi] = x;
            set(&mut probe, v + h);
            let up = nll(&probe);
            set(&mut probe, v - h);
            let down = nll(&probe);
            set(&mut probe, v);
            worst = max_nan(worst, gradient_rel_error(*g, (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn prop_gradient(o: &SuiteOptions) -> (bool, String) {
    let errs = o.exec.map(o.gradient_seeds as usize, |s| gradient_check_seed(s as u64));
    let worst = errs.iter().cloned().fold(0.0, max_nan);
    (within(worst, GRADIENT_TOL), format!("worst relative error {worst:.3e} over {} seeds (tol {GRADIENT_TOL:e})", o.gradient_seeds))
}

/// `(analytic, numeric)` log-determinants of a random layer at a random point.
pub fn logdet_pair(kind: LayerKind, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = rng.random_range(2..=8);
    let layer = random_layer(kind, d, seed);
    let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let analytic = layer.forward(&x).map(|r| r.1).unwrap_or(f64::NAN);
    let numeric = numeric_logdet(|v| layer.forward(v).map(|r| r.0).unwrap_or_else(|_| vec![f64::NAN; v.len()]), &x).unwrap_or(f64::NAN);
    (analytic, numeric)
}

fn prop_logdet(o: &SuiteOptions) -> (bool, String) {
    let mut worst = 0.0f64;
    let mut worst_kind = "";
    for kind in ALL_KINDS {
        let errs = o.exec.map(o.logdet_seeds as usize, |s| {
            let (a, n) = logdet_pair(kind, s as u64);
            (a - n).abs() / n.abs().max(1.0)
        });
        let e = errs.iter().cloned().fold(0.0, max_nan);
        if !(e <= worst) {
            worst = e;
            worst_kind = kind.name();
        }
    }
    (within(worst, LOGDET_TOL), format!("worst relative error {worst:.3e} ({worst_kind}), 6 kinds x {} seeds", o.logdet_seeds))
}

fn round_trip_error(model: &FlowModel, points: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|x| match model.forward(x).and_then(|(z, _)| model.inverse(&z)) {
            Ok(back) => back.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, max_nan),
            Err(_) => f64::NAN,
        })
        .fold(0.0, max_nan)
}

fn prop_round_trip_init(o: &SuiteOptions) -> (bool, String) {
    let mut worst = 0.0f64;
    for beta in [0.5, 0.7, 0.9, 1.0] {
        let m = ModelConfig { beta, ..ModelConfig::default() }.build().expect("default config");
        worst = max_nan(worst, round_trip_error(&m, &normal_points(200, 2, 1)));
    }
    let image = ModelConfig { shape: Shape::new(8, 8, 1), levels: 3, k: 2, split_fraction: 0.75, blocks_per_level: 1, hidden: 8, bins: 8, ..ModelConfig::default() };
    worst = max_nan(worst, round_trip_error(&image.build().expect("image config"), &normal_points(20, 64, 2)));
    let n = (o.gradient_seeds * 2) as usize;
    let errs = o.exec.map(n, |s| round_trip_error(&random_proposed_model(4, 2, 8, 4, 8, s as u64), &normal_points(50, 4, s as u64)));
    worst = errs.into_iter().fold(worst, max_nan);
    (within(worst, INIT_ROUND_TRIP_TOL), format!("max |g(f(x)) - x| {worst:.3e} over initialized and randomized models"))
}

fn prop_round_trip_trained(o: &SuiteOptions) -> (bool, String) {
    let data = toy_dataset("rings", 10_000, 1).expect("rings");
    let (train_set, heldout) = split_heldout(&data);
    let cfg = ModelConfig::default();
    let mut model = cfg.build().expect("default config");
    let tc = TrainConfig { steps: o.train_steps, ..TrainConfig::default() };
    let outcome = match train(&mut model, &tc, &BackpropOptions::default(), &train_set, None, o.exec) {
        Ok(out) => out,
        Err(e) => return (false, format!("training failed: {e}")),
    };
    let points: Vec<Vec<f64>> = (0..heldout.rows()).map(|i| heldout.row(i).to_vec()).collect();
    let mut wide = normal_points(500, 2, 9);
    wide.iter_mut().flatten().for_each(|v| *v *= 3.0);
    let worst = max_nan(round_trip_error(&model, &points), round_trip_error(&model, &wide));
    let rejected = outcome.trace.events.len();
    (
        within(worst, TRAINED_ROUND_TRIP_TOL) && outcome.diverged_at.is_none(),
        format!("max |g(f(x)) - x| {worst:.3e} after {} rings steps ({rejected} rejected)", o.train_steps),
    )
}

/// `(identity error, |total logdet|, coupling logdet error, activation logdet
/// error)` of one freshly initialized block at `beta`.
pub fn block_init_errors(beta: f64, seed: u64) -> (f64, f64, f64, f64) {
    let d = 4;
    let cfg = ModelConfig { beta, blocks_per_level: 1, shape: Shape::vector(d), hidden: 8, bins: 8, seed, ..ModelConfig::default() };
    let model = cfg.build().expect("block config");
    let target = d as f64 * (1.0 / beta).ln();
    let (mut id, mut tot, mut cpl, mut act) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for x in normal_points(100, d, seed).iter().map(|p| p.iter().map(|v| 2.0 * v).collect::<Vec<_>>()) {
        let mut h = x.clone();
        let mut total = 0.0;
        for layer in model.layers() {
            let (y, ld) = match layer.forward(&h) {
                Ok(r) => r,
                Err(_) => return (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
            };
            match layer.kind() {
                LayerKind::DualCoupling => cpl = max_nan(cpl, (ld - target).abs()),
                LayerKind::RqActivation => act = max_nan(act, (ld + target).abs()),
                _ => {}
            }
            total += ld;
            h = y;
        }
        id = h.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(id, max_nan);
        tot = max_nan(tot, total.abs());
    }
    (id, tot, cpl, act)
}

fn prop_block_init(_: &SuiteOptions) -> (bool, String) {
    let mut worst = [0.0f64; 4];
    for beta in [0.5, 0.7, 0.9, 1.0] {
        let e = block_init_errors(beta, 3);
        for (w, v) in worst.iter_mut().zip([e.0, e.1, e.2, e.3]) {
            *w = max_nan(*w, v);
        }
    }
    let ok = worst.iter().all(|v| within(*v, BLOCK_INIT_TOL));
    (ok, format!("identity {:.2e}, |logdet| {:.2e}, coupling split {:.2e}, activation split {:.2e}", worst[0], worst[1], worst[2], worst[3]))
}

/// `(trained mean log-likelihood, PPCA bound)` of a linear flow fitted on
/// correlated Gaussian data.
pub fn linear_flow_fit(samples: usize, steps: usize, seed: u64, exec: Exec) -> crate::Result<(f64, f64)> {
    let data = correlated_gaussian(samples, 4, seed);
    let bound = ppca_lmax(&data, DEFAULT_EPS)?.lmax_nats;
    let mut model = ModelConfig { kind: ModelKind::Linear, shape: Shape::vector(4), seed, ..ModelConfig::default() }.build()?;
    let tc = TrainConfig { steps, batch_size: 512, decay_steps: steps as f64, seed, ..TrainConfig::default() };
    train(&mut model, &tc, &BackpropOptions::default(), &data, None, exec)?;
    Ok((model.mean_log_likelihood(&data, exec)?, bound))
}

fn prop_qlf_optimum(o: &SuiteOptions) -> (bool, String) {
    match linear_flow_fit(o.qlf_samples, o.qlf_steps, 7, o.exec) {
        Ok((ll, bound)) => {
            let gap = bound - ll;
            (gap <= QLF_GAP_TOL && ll <= bound + QLF_EXCESS_TOL, format!("trained {ll:.6} vs bound {bound:.6} (gap {gap:.2e})"))
        }
        Err(e) => (false, format!("fit failed: {e}")),
    }
}

/// Random symmetric positive-definite matrix and random orthogonal matrix.
pub fn random_spd_and_orthogonal(d: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Matrix::new(d, d, (0..d * d).map(|_| normal(&mut rng)).collect()).expect("square");
    let mut s = b.matmul(&b.transpose());
    for i in 0..d {
        s[(i, i)] += 0.1;
    }
    let a = Matrix::new(d, d, (0..d * d).map(|_| normal(&mut rng)).collect()).expect("square").symmetrized();
    let u = sym_eig(&a).expect("symmetric").vectors;
    (s, u)
}

fn prop_qlf_stationary(o: &SuiteOptions) -> (bool, String) {
    let norms = o.exec.map(o.stationary_trials as usize, |t| {
        let d = 2 + t % 7;
        let (s, u) = random_spd_and_orthogonal(d, t as u64);
        qlf_stationary_w(&s, &u).and_then(|w| qlf_gradient(&w, &s)).map(|g| g.frobenius_norm()).unwrap_or(f64::NAN)
    });
    let worst = norms.into_iter().fold(0.0, max_nan);
    (within(worst, STATIONARY_TOL), format!("max ||grad||_F {worst:.3e} over {} trials", o.stationary_trials))
}

fn prop_hadamard(o: &SuiteOptions) -> (bool, String) {
    let reports = o.exec.map(o.hadamard_trials as usize, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64 ^ 0xada);
        let d = rng.random_range(2..=8);
        let layer = random_layer(ALL_KINDS[t % ALL_KINDS.len()], d, t as u64);
        let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let j = numeric_jacobian_auto(|v| layer.forward(v).map(|r| r.0).unwrap_or_else(|_| vec![f64::NAN; v.len()]), &x);
        let r = hadamard_audit(&j);
        r.ok && r.det.is_finite()
    });
    let violations = reports.iter().filter(|ok| !**ok).count();
    (violations == 0, format!("{violations} violations in {} Jacobians (slack {HADAMARD_SLACK:e})", o.hadamard_trials))
}

fn random_knots(seed: u64, bins: usize, corrupt: bool) -> (KnotSet, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = uniform(&mut rng, 1.0, 4.0);
    let mut act = RqActivation::new(1, bins, 0.8, width).expect("valid activation");
    act.randomize(&mut rng, 1.0, width);
    if corrupt && seed == 0 {
        act.params_mut()[0] = f64::NAN;
    }
    let kn = act.knots(0).expect("valid knot parameters");
    (kn, width)
}

const SPLINE_BINS: usize = 8;

fn spline_grid(kn: &KnotSet, n: usize) -> impl Iterator<Item = f64> + '_ {
    let x = kn.inner_x();
    let (lo, hi) = (x[0] - 1.0, x[x.len() - 1] + 1.0);
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

fn prop_spline_round_trip(o: &SuiteOptions) -> (bool, String) {
    let mut worst = 0.0f64;
    for seed in 0..o.spline_seeds {
        let (kn, _) = random_knots(seed, SPLINE_BINS, o.corrupt_knots);
        let far = [-1e3, -150.0, -20.0, 20.0, 150.0, 1e3];
        for x in spline_grid(&kn, o.spline_grid).chain(far) {
            let (y, _) = kn.eval(x);
            let back = kn.inverse(y).map(|r| r.0).unwrap_or(f64::NAN);
            worst = max_nan(worst, (back - x).abs() / x.abs().max(1.0));
        }
    }
    (within(worst, SPLINE_ROUND_TRIP_TOL), format!("max round-trip error {worst:.3e} over {} knot sets", o.spline_seeds))
}

fn prop_spline_continuity(o: &SuiteOptions) -> (bool, String) {
    let mut worst = 0.0f64;
    for seed in 0..o.spline_seeds {
        let (kn, _) = random_knots(seed, SPLINE_BINS, o.corrupt_knots);
        let xs = kn.extended_x();
        for j in 1..xs.len() - 1 {
            let (yl, dl) = kn.eval_in_bin(j - 1, xs[j]);
            let (yr, dr) = kn.eval_in_bin(j, xs[j]);
            worst = max_nan(worst, max_nan((dl - dr).abs(), (yl - yr).abs()));
        }
    }
    (within(worst, SPLINE_CONTINUITY_TOL), format!("max knot mismatch {worst:.3e}"))
}

fn prop_spline_contractive(o: &SuiteOptions) -> (bool, String) {
    let mut worst = 0.0f64;
    let mut over = 0usize;
    for seed in 0..o.spline_seeds {
        let (kn, _) = random_knots(seed, SPLINE_BINS, o.corrupt_knots);
        let ok_params = kn.inner_alpha().iter().all(|a| *a > 0.0 && *a < 1.0) && kn.deltas().iter().all(|d| *d > 0.0 && *d <= 1.0);
        if !ok_params {
            return (false, format!("seed {seed}: knot slopes or ratios outside (0, 1]"));
        }
        for x in spline_grid(&kn, o.spline_grid) {
            let (_, dydx) = kn.eval(x);
            worst = max_nan(worst, dydx);
            if !(dydx <= 1.0 + SPLINE_SLOPE_SLACK) {
                over += 1;
            }
        }
    }
    (within(worst, 1.0 + SPLINE_SLOPE_SLACK), format!("max dy/dx {worst:.6} ({over} of {} points above 1)", o.spline_seeds as usize * o.spline_grid))
}

fn prop_spline_local_maxima(o: &SuiteOptions) -> (bool, String) {
    let mut worst = 0usize;
    for seed in 0..o.spline_seeds {
        let (kn, _) = random_knots(seed, SPLINE_BINS, o.corrupt_knots);
        let x = kn.inner_x();
        let count = local_maxima_count(|v| kn.eval(v).1, x[0], x[x.len() - 1], o.spline_grid.max(3));
        worst = worst.max(count);
        if kn.eval(0.0).1.is_nan() {
            return (false, format!("seed {seed}: derivative is not finite"));
        }
    }
    (worst <= SPLINE_BINS, format!("at most {worst} local maxima of dy/dx with I = {SPLINE_BINS}"))
}

fn prop_spline_linear(_: &SuiteOptions) -> (bool, String) {
    let mut worst = 0.0f64;
    for beta in [0.3, 0.5, 0.7, 0.9, 1.0] {
        let act = RqActivation::new(1, SPLINE_BINS, beta, 2.5).expect("valid activation");
        let kn = act.knots(0).expect("valid knots");
        for i in 0..=2000 {
            let x = -50.0 + 0.05 * i as f64;
            let (y, dydx) = kn.eval(x);
            worst = max_nan(worst, max_nan((y - beta * x).abs(), (dydx - beta).abs()));
        }
    }
    (within(worst, SPLINE_LINEAR_TOL), format!("max deviation from slope-beta line {worst:.3e}"))
}

/// Smallest and largest Mexican-hat scale seen while sweeping a single head
/// through `[-4, 4]` on `n` points.
pub fn hat_sweep_extrema(n: usize) -> (f64, f64) {
    let head = [HatHead { w: Matrix::identity(1), b: vec![0.0] }];
    (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
        let p = -4.0 + 8.0 * i as f64 / (n - 1) as f64;
        let s = mexican_hat_scale(&[p], &head)[0];
        (lo.min(s), hi.max(s))
    })
}

fn prop_mexican_hat(o: &SuiteOptions) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let per_net = 1000;
    for _ in 0..o.hat_inputs.div_ceil(per_net) {
        let m = rng.random_range(1..=6);
        let (n_in, n_out) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let heads: Vec<HatHead> = (0..m)
            .map(|_| HatHead {
                w: Matrix::new(n_out, n_in, (0..n_in * n_out).map(|_| normal(&mut rng)).collect()).expect("shape"),
                b: (0..n_out).map(|_| 2.0 * normal(&mut rng)).collect(),
            })
            .collect();
        for _ in 0..per_net.div_ceil(n_out) {
            let phi: Vec<f64> = (0..n_in).map(|_| 3.0 * normal(&mut rng)).collect();
            for s in mexican_hat_scale(&phi, &heads) {
                lo = lo.min(s);
                hi = hi.max(s);
            }
        }
    }
    let in_range = lo >= 0.5 && hi <= 3.0;
    let (smin, smax) = hat_sweep_extrema(400_001);
    let (emin, emax) = (mexican_hat_min().exp(), mexican_hat(0.0).exp());
    let ext_ok = (smin - emin).abs() <= HAT_EXTREMA_TOL && (smax - emax).abs() <= HAT_EXTREMA_TOL;
    (in_range && ext_ok, format!("random scales in [{lo:.4}, {hi:.4}]; sweep extrema {smin:.7}, {smax:.7} vs {emin:.7}, {emax:.7}"))
}

type Property = fn(&SuiteOptions) -> (bool, String);

/// Names of the suite's properties in execution order.
pub const PROPERTIES: [(&str, Property); 14] = [
    ("gradient_check", prop_gradient),
    ("logdet_check", prop_logdet),
    ("round_trip_init", prop_round_trip_init),
    ("round_trip_trained", prop_round_trip_trained),
    ("block_init", prop_block_init),
    ("qlf_optimum", prop_qlf_optimum),
    ("qlf_stationary", prop_qlf_stationary),
    ("hadamard_chain", prop_hadamard),
    ("spline_round_trip", prop_spline_round_trip),
    ("spline_continuity", prop_spline_continuity),
    ("spline_contractive", prop_spline_contractive),
    ("spline_local_maxima", prop_spline_local_maxima),
    ("spline_linear", prop_spline_linear),
    ("mexican_hat_range", prop_mexican_hat),
];

/// Runs every property, optionally only those whose name contains `filter`.
/// `on_result` is called as each property finishes.
pub fn run_suite(opts: &SuiteOptions, filter: Option<&str>, mut on_result: impl FnMut(&PropertyResult)) -> SuiteReport {
    let mut report = SuiteReport::default();
    for (name, prop) in PROPERTIES {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let t0 = Instant::now();
        let (passed, detail) = prop(opts);
        let r = PropertyResult { name, passed, detail, seconds: t0.elapsed().as_secs_f64() };
        on_result(&r);
        report.results.push(r);
    }
    report
}
