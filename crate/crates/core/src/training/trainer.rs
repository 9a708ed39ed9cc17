use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{FlowError, Result};
use crate::exec::Exec;
use crate::flow::backprop::{backprop, BackpropOptions};
use crate::flow::layer::Bijector;
use crate::flow::model::{nll_bits_per_dim, FlowModel};
use crate::linalg::Matrix;
use crate::training::adamax::{adamax_step, AdamaxConfig, AdamaxState};
use crate::training::trace::{TraceEvent, TraceRow, TrainTrace};

/// Consecutive non-finite steps after which training stops.
pub const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    /// Step at which training gave up, if it did.
    pub diverged_at: Option<usize>,
    /// `(step, mean held-out NLL)` pairs, when a held-out set was supplied.
    pub heldout: Vec<(usize, f64)>,
}

fn is_numeric_failure(e: &FlowError) -> bool {
    matches!(
        e,
        FlowError::NonFinite { .. }
            | FlowError::NonFiniteGradient
            | FlowError::NonInvertibleParams(_)
            | FlowError::NoRootInBin
            | FlowError::OutOfDomain { .. }
            | FlowError::Singular { .. }
            | FlowError::OutOfSupport
    )
}

fn gather(data: &Matrix, idx: &[usize]) -> Matrix {
    let d = data.cols();
    let mut v = Vec::with_capacity(idx.len() * d);
    for i in idx {
        v.extend_from_slice(data.row(*i));
    }
    Matrix::new(idx.len(), d, v).expect("rows of a valid matrix")
}

/// Mean NLL of `data`, or `None` if any point fails numerically.
pub fn mean_nll(model: &FlowModel, data: &Matrix, exec: Exec) -> Option<f64> {
    model.mean_log_likelihood(data, exec).ok().map(|v| -v).filter(|v| v.is_finite())
}

/// Maximum-likelihood training with Adamax. One trace row is recorded per
/// successful step, computed on that step's minibatch before the update.
pub fn train(model: &mut FlowModel, cfg: &TrainConfig, opts: &BackpropOptions, data: &Matrix, heldout: Option<&Matrix>, exec: Exec) -> Result<TrainOutcome> {
    if data.cols() != model.dim() {
        return Err(FlowError::Shape(format!("dataset has {} dimensions, model expects {}", data.cols(), model.dim())));
    }
    if data.rows() == 0 {
        return Err(FlowError::Shape("empty dataset".into()));
    }
    let names = model.layer_names().into_iter().map(String::from).collect();
    let mut trace = TrainTrace::new(names, model.dim(), cfg.bit_depth);
    let mut states: Vec<AdamaxState> = model.layers().map(|l| AdamaxState::new(l.params().len())).collect();
    let adamax = AdamaxConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.min(data.rows());
    let mut heldout_log = Vec::new();
    let mut bad_run = 0;
    let mut diverged_at = None;

    for step in 0..cfg.steps {
        if let (Some(h), true) = (heldout, cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            heldout_log.push((step, mean_nll(model, h, exec).unwrap_or(f64::NAN)));
        }
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mb = gather(data, &order[cursor..cursor + batch]);
        cursor += batch;
        let lr = cfg.learning_rate(step);
        match backprop(model, &mb, opts, exec) {
            Ok(out) => {
                bad_run = 0;
                trace.rows.push(TraceRow {
                    step,
                    nll_nats: out.nll,
                    nll_bpd: nll_bits_per_dim(-out.nll, model.dim(), cfg.bit_depth),
                    logdet: out.stats.logdet.clone(),
                    variance: out.stats.variance.clone(),
                    grad_norm: out.grads.norms(),
                });
                for ((layer, g), st) in model.layers_mut().zip(&out.grads.layers).zip(states.iter_mut()) {
                    adamax_step(layer.params_mut(), g, st, lr, &adamax)?;
                }
            }
            Err(e) if is_numeric_failure(&e) => {
                bad_run += 1;
                trace.events.push(TraceEvent { step, message: format!("step rejected: {e}") });
                if bad_run >= DIVERGENCE_PATIENCE {
                    trace.events.push(TraceEvent { step, message: format!("diverged after {DIVERGENCE_PATIENCE} consecutive non-finite steps") });
                    diverged_at = Some(step);
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    if let (Some(h), None, true) = (heldout, diverged_at, cfg.eval_every > 0) {
        heldout_log.push((cfg.steps, mean_nll(model, h, exec).unwrap_or(f64::NAN)));
    }
    Ok(TrainOutcome { trace, diverged_at, heldout: heldout_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::training::data::toy_dataset;

    #[test]
    fn zero_steps_leave_model_untouched() {
        let cfg = ModelConfig { hidden: 4, bins: 4, ..ModelConfig::default() };
        let mut m = cfg.build().unwrap();
        let before: Vec<Vec<f64>> = m.layers().map(|l| l.params().to_vec()).collect();
        let data = toy_dataset("rings", 64, 0).unwrap();
        let t = TrainConfig { steps: 0, ..TrainConfig::default() };
        let out = train(&mut m, &t, &BackpropOptions::default(), &data, None, Exec::Sequential).unwrap();
        assert!(out.trace.rows.is_empty());
        let after: Vec<Vec<f64>> = m.layers().map(|l| l.params().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = ModelConfig { hidden: 4, bins: 4, beta: 0.7, ..ModelConfig::default() };
        let data = toy_dataset("two_moons", 200, 0).unwrap();
        let t = TrainConfig { steps: 5, batch_size: 32, ..TrainConfig::default() };
        let run = |exec| {
            let mut m = cfg.build().unwrap();
            let out = train(&mut m, &t, &BackpropOptions::default(), &data, None, exec).unwrap();
            (out.trace, m.layers().map(|l| l.params().to_vec()).collect::<Vec<_>>())
        };
        let (a, pa) = run(Exec::Sequential);
        let (b, pb) = run(Exec::default());
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.rows.len(), 5);
        assert!(a.rows[0].total_logdet().abs() < 1e-9);
    }
}
