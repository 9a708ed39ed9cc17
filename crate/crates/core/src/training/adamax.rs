//! Adamax (infinity-norm Adam).

use crate::error::{FlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamaxConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub t: u64,
}

impl AdamaxState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], u: vec![0.0; n], t: 0 }
    }
}

/// One descent step on `params`. Non-finite gradients leave everything
/// untouched and return [`FlowError::NonFiniteGradient`].
pub fn adamax_step(params: &mut [f64], grads: &[f64], state: &mut AdamaxState, lr: f64, cfg: &AdamaxConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(FlowError::Shape("parameter, gradient and state sizes differ".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(FlowError::NonFiniteGradient);
    }
    state.t += 1;
    let step = lr / (1.0 - cfg.beta1.powi(state.t as i32));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.u[i] = (cfg.beta2 * state.u[i]).max(g.abs());
        params[i] -= step * state.m[i] / (state.u[i] + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamaxState::new(2);
        s.m = vec![0.5, 0.5];
        s.u = vec![1.0, 1.0];
        let cfg = AdamaxConfig::default();
        let before = p.clone();
        adamax_step(&mut p, &[0.0, 0.0], &mut s, 0.01, &cfg).unwrap();
        assert_eq!(s.m, vec![0.45, 0.45]);
        assert_eq!(s.u, vec![0.999, 0.999]);
        let mut p2 = before.clone();
        let mut fresh = AdamaxState::new(2);
        adamax_step(&mut p2, &[0.0, 0.0], &mut fresh, 0.01, &cfg).unwrap();
        assert_eq!(p2, before);
        assert_ne!(p, before);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let cfg = AdamaxConfig::default();
        let mut s = AdamaxState::new(1);
        let mut p = vec![0.0];
        for _ in 0..200 {
            let before = p[0];
            adamax_step(&mut p, &[3.0], &mut s, 0.01, &cfg).unwrap();
            assert!(((before - p[0]) - 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamaxConfig::default();
        let mut s = AdamaxState::new(2);
        let mut p = vec![1.5, -0.8];
        let target = [0.3, 0.2];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - target[0]), 8.0 * (p[1] - target[1])];
            adamax_step(&mut p, &g, &mut s, 0.01, &cfg).unwrap();
        }
        assert!((p[0] - target[0]).abs() < 1e-6 && (p[1] - target[1]).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn rejects_nan() {
        let mut p = vec![1.0];
        let mut s = AdamaxState::new(1);
        assert_eq!(adamax_step(&mut p, &[f64::NAN], &mut s, 0.1, &AdamaxConfig::default()), Err(FlowError::NonFiniteGradient));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.t, 0);
    }
}
