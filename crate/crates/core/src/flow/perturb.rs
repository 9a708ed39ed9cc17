//! Latent perturbation: encode an input, keep or redraw per-level latents,
//! decode.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FlowError, Result};
use crate::flow::model::FlowModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    /// Keep the first `k` levels, redraw the rest.
    KeepFirst,
    /// Redraw the first `k` levels, keep the rest.
    ResampleFirst,
}

impl PerturbMode {
    pub fn name(self) -> &'static str {
        match self {
            PerturbMode::KeepFirst => "keep_first",
            PerturbMode::ResampleFirst => "resample_first",
        }
    }
}

impl FromStr for PerturbMode {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep_first" => Ok(PerturbMode::KeepFirst),
            "resample_first" => Ok(PerturbMode::ResampleFirst),
            other => Err(FlowError::UnknownName(other.to_string())),
        }
    }
}

/// Perturbs `x` through the latent hierarchy. `k` must lie in `[0, levels]`.
pub fn perturb(model: &FlowModel, x: &[f64], k: usize, mode: PerturbMode, temperature: f64, seed: u64) -> Result<Vec<f64>> {
    let levels = model.levels().len();
    if k > levels {
        return Err(FlowError::OutOfDomain { what: "perturbation level count k", value: k as f64 });
    }
    if !(temperature > 0.0) {
        return Err(FlowError::OutOfDomain { what: "sampling temperature", value: temperature });
    }
    let (mut latents, _) = model.encode(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = model.sample_latents(&mut rng, temperature);
    for (i, (kept, drawn)) in latents.iter_mut().zip(fresh).enumerate() {
        let redraw = match mode {
            PerturbMode::KeepFirst => i >= k,
            PerturbMode::ResampleFirst => i < k,
        };
        if redraw {
            *kept = drawn;
        }
    }
    Ok(model.decode(&latents)?.0)
}

/// `max |a - b|`.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::flow::layer::Shape;

    fn image_model() -> FlowModel {
        let cfg = ModelConfig { shape: Shape::new(8, 8, 1), levels: 3, blocks_per_level: 1, split_fraction: 0.75, k: 2, hidden: 4, bins: 4, ..ModelConfig::default() };
        let mut m = cfg.build().unwrap();
        crate::check::randomize_model(&mut m, 3, 0.1);
        m
    }

    #[test]
    fn keeping_everything_reconstructs() {
        let m = image_model();
        let x: Vec<f64> = (0..64).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect();
        let y = perturb(&m, &x, 3, PerturbMode::KeepFirst, 1.0, 0).unwrap();
        assert!(max_abs_diff(&x, &y) < 1e-9);
        let y = perturb(&m, &x, 0, PerturbMode::ResampleFirst, 1.0, 0).unwrap();
        assert!(max_abs_diff(&x, &y) < 1e-9);
    }

    #[test]
    fn k_zero_ignores_the_input() {
        let m = image_model();
        let a = vec![0.1; 64];
        let b = vec![-0.3; 64];
        let pa = perturb(&m, &a, 0, PerturbMode::KeepFirst, 1.0, 5).unwrap();
        let pb = perturb(&m, &b, 0, PerturbMode::KeepFirst, 1.0, 5).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn rejects_k_past_levels() {
        let m = image_model();
        assert!(perturb(&m, &[0.0; 64], 4, PerturbMode::KeepFirst, 1.0, 0).is_err());
        assert_eq!("resample_first".parse::<PerturbMode>().unwrap(), PerturbMode::ResampleFirst);
    }
}
