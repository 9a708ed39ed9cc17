use flowdet::check::{random_layer, ALL_KINDS};
use flowdet::layers::coupling::{mexican_hat_scale, DualCoupling, HatHead, ScaleHead};
use flowdet::layers::init::block_init;
use flowdet::layers::modality::local_maxima_count;
use flowdet::layers::spline::knots_from_params;
use flowdet::{Bijector, Layer, Matrix, ModelConfig, Shape};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn theta(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, n)
}

fn knot_params() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    (2usize..=17).prop_flat_map(|n| (theta(n), theta(n), theta(n), 0.2f64..6.0))
}

/// Ridders' extrapolated central difference with initial step `h0`.
fn central(f: impl Fn(f64) -> f64, x: f64, h0: f64) -> f64 {
    const N: usize = 10;
    let mut a = [[0.0f64; N]; N];
    let mut h = h0;
    a[0][0] = (f(x + h) - f(x - h)) / (2.0 * h);
    let (mut best, mut err) = (a[0][0], f64::INFINITY);
    for i in 1..N {
        h /= 1.4;
        a[0][i] = (f(x + h) - f(x - h)) / (2.0 * h);
        let mut fac = 1.96;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= 1.96;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn knots_are_ordered_and_bounded((tx, ty, ta, w) in knot_params()) {
        let kn = knots_from_params(&tx, &ty, &ta, w, 0.7).unwrap();
        prop_assert!(kn.inner_x().windows(2).all(|p| p[0] < p[1]));
        prop_assert!(kn.inner_y().windows(2).all(|p| p[0] < p[1]));
        prop_assert!(kn.extended_x().windows(2).all(|p| p[0] < p[1]));
        prop_assert!(kn.deltas().iter().all(|d| *d > 0.0 && *d <= 1.0));
        prop_assert!(kn.inner_alpha().iter().all(|a| *a > 0.0 && *a < 1.0));
        prop_assert_eq!(kn.bins(), tx.len() - 1);
    }

    #[test]
    fn spline_is_monotone_and_invertible((tx, ty, ta, w) in knot_params(), xs in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let kn = knots_from_params(&tx, &ty, &ta, w, 0.7).unwrap();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let ys: Vec<f64> = sorted.iter().map(|x| kn.eval(*x).0).collect();
        prop_assert!(ys.windows(2).all(|p| p[0] <= p[1]));
        for x in xs {
            let (y, dydx) = kn.eval(x);
            prop_assert!(dydx > 0.0);
            let (back, dxdy) = kn.inverse(y).unwrap();
            prop_assert!((back - x).abs() <= 1e-10 * x.abs().max(1.0));
            prop_assert!((dxdy * dydx - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn spline_derivative_matches_differences((tx, ty, ta, w) in knot_params(), x in -8.0f64..8.0) {
        let kn = knots_from_params(&tx, &ty, &ta, w, 0.7).unwrap();
        let gap = kn.extended_x().iter().map(|k| (k - x).abs()).fold(f64::INFINITY, f64::min);
        prop_assume!(gap > 1e-6);
        let (_, dydx) = kn.eval(x);
        let fd = central(|v| kn.eval(v).0, x, (0.5 * gap).min(1e-2));
        prop_assert!((fd - dydx).abs() <= 1e-7 * dydx.max(1.0), "{} vs {}", fd, dydx);
    }

    #[test]
    fn derivative_has_at_most_one_maximum_per_bin((tx, ty, ta, w) in knot_params()) {
        let kn = knots_from_params(&tx, &ty, &ta, w, 0.7).unwrap();
        let x = kn.inner_x();
        let count = local_maxima_count(|v| kn.eval(v).1, x[0], x[x.len() - 1], 20_000);
        prop_assert!(count <= kn.bins(), "{} maxima with {} bins", count, kn.bins());
    }

    #[test]
    fn every_layer_round_trips(k in 0usize..6, d in 2usize..=8, seed in 0u64..1000, xs in prop::collection::vec(-2.5f64..2.5, 8)) {
        let layer = random_layer(ALL_KINDS[k], d, seed);
        let x = &xs[..d];
        let (y, ld) = layer.forward(x).unwrap();
        let (back, neg) = layer.inverse(&y).unwrap();
        let err = back.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-8, "{}: {}", layer.kind().name(), err);
        prop_assert!((ld + neg).abs() <= 1e-8 * ld.abs().max(1.0));
    }

    #[test]
    fn mexican_hat_scales_stay_in_range(phi in prop::collection::vec(-50.0f64..50.0, 1..6), seed in 0u64..10_000, m in 1usize..6) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_out = 3;
        let heads: Vec<HatHead> = (0..m)
            .map(|_| HatHead {
                w: Matrix::new(n_out, phi.len(), (0..n_out * phi.len()).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap(),
                b: (0..n_out).map(|_| rng.random_range(-3.0..3.0)).collect(),
            })
            .collect();
        for s in mexican_hat_scale(&phi, &heads) {
            prop_assert!((0.64..=2.7183).contains(&s), "{}", s);
        }
    }

    #[test]
    fn coupling_scales_stay_in_range(seed in 0u64..10_000, xs in prop::collection::vec(-20.0f64..20.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = DualCoupling::new(6, 3, 5, ScaleHead::MexicanHat { heads: 3 }, 0.0, &mut rng).unwrap();
        for (i, p) in c.params_mut().iter_mut().enumerate() {
            *p += ((i as f64 + seed as f64) * 0.61).sin() * 2.0;
        }
        let (s1, s2) = c.scales(&xs);
        prop_assert!(s1.iter().chain(&s2).all(|s| (0.5..=3.0).contains(s)));
    }

    #[test]
    fn block_init_is_identity(beta in (-1.0f64).exp()..=1.0, xs in prop::collection::vec(-5.0f64..5.0, 4)) {
        let cfg = ModelConfig { beta, shape: Shape::vector(4), blocks_per_level: 1, hidden: 6, bins: 5, ..ModelConfig::default() };
        let m = cfg.build().unwrap();
        let mut layers: Vec<Layer> = m.layers().cloned().collect();
        block_init(&mut layers, beta).unwrap();
        let mut h = xs.clone();
        let mut total = 0.0;
        for l in &layers {
            let (y, ld) = l.forward(&h).unwrap();
            h = y;
            total += ld;
        }
        let err = h.iter().zip(&xs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-9);
        prop_assert!(total.abs() <= 1e-9);
    }
}

#[test]
fn block_init_rejects_unreachable_beta() {
    let cfg = ModelConfig { beta: 0.3, shape: Shape::vector(4), blocks_per_level: 1, hidden: 6, bins: 5, ..ModelConfig::default() };
    assert_eq!(cfg.build().unwrap_err(), flowdet::FlowError::BadBeta(0.3));
}
