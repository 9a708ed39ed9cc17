//! Blockwise volume-preserving initialization.
//!
//! Each block starts as a linear map whose expansive part (convolution and
//! coupling) scales by `1/beta` and whose activation scales by `beta`, so the
//! composed block is exactly the identity.

use crate::error::{FlowError, Result};
use crate::flow::layer::{Bijector, Layer};
use crate::layers::coupling::{mexican_hat_root, ScaleHead};
use crate::linalg::Matrix;

/// Default half-width of the spline's inner box at initialization.
pub const DEFAULT_BOX_WIDTH: f64 = 3.0;

/// Re-initializes every layer of `block` in place. With a Mexican-hat head
/// the coupling scale cannot exceed `e`, so `beta` must be at least `1/e`.
pub fn block_init(block: &mut [Layer], beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(FlowError::BadBeta(beta));
    }
    for layer in block.iter_mut() {
        match layer {
            Layer::InvConv(c) => {
                let n = c.channels_out();
                c.set_weight(&Matrix::identity(n));
            }
            Layer::DualCoupling(c) => {
                c.zero_heads();
                let bias = match c.head() {
                    ScaleHead::MexicanHat { .. } if -beta.ln() > 1.0 => return Err(FlowError::BadBeta(beta)),
                    ScaleHead::MexicanHat { .. } => mexican_hat_root(-beta.ln()),
                    ScaleHead::Exp => -beta.ln(),
                };
                c.set_head_bias(bias);
            }
            Layer::RqActivation(a) => a.set_linear(beta, DEFAULT_BOX_WIDTH),
            Layer::Contractive(_) => {}
            Layer::Scale(s) => s.params_mut().iter_mut().for_each(|v| *v = 1.0),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::layer::Shape;
    use crate::layers::activation::RqActivation;
    use crate::layers::coupling::DualCoupling;
    use crate::layers::inv_conv::InvConv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(d: usize, rng: &mut ChaCha8Rng) -> Vec<Layer> {
        vec![
            Layer::InvConv(InvConv::new(Shape::vector(d), 1).unwrap()),
            Layer::DualCoupling(DualCoupling::new(d, d / 2, 8, ScaleHead::MexicanHat { heads: 4 }, 0.0, rng).unwrap()),
            Layer::RqActivation(RqActivation::new(d, 16, 1.0, 3.0).unwrap()),
        ]
    }

    #[test]
    fn half_beta_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = block(4, &mut rng);
        block_init(&mut b, 0.5).unwrap();
        let x = [0.3, -1.2, 2.0, 0.7];
        let (h, l0) = b[0].forward(&x).unwrap();
        let (h, l1) = b[1].forward(&h).unwrap();
        let (y, l2) = b[2].forward(&h).unwrap();
        assert_eq!(l0, 0.0);
        assert!((l1 - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l2 + 4.0 * 2f64.ln()).abs() < 1e-12);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = block(2, &mut rng);
        for beta in [0.0, -0.5, 1.01, f64::NAN] {
            assert!(matches!(block_init(&mut b, beta), Err(FlowError::BadBeta(_))));
        }
    }
}
