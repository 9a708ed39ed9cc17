use flowdet::check::{linear_flow_fit, normal_points, random_spd_and_orthogonal};
use flowdet::qlf::{hadamard_audit, ppca_lmax, prop1_audit, qlf_gradient, qlf_objective, qlf_per_point_report, qlf_stationary_w, DEFAULT_EPS};
use flowdet::training::data::correlated_gaussian;
use flowdet::training::trace::{TraceRow, TrainTrace};
use flowdet::{Exec, FlowError, Matrix};
use proptest::prelude::*;

const LN_2PI: f64 = 1.8378770664093453;

/// Log-determinant through a Cholesky factorization.
fn chol_logdet(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    2.0 * (0..n).map(|i| l[i][i].ln()).sum::<f64>()
}

fn covariance(data: &Matrix) -> Vec<Vec<f64>> {
    let (n, d) = (data.rows(), data.cols());
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| data.row(r)[c]).sum::<f64>() / n as f64).collect();
    let mut s = vec![vec![0.0; d]; d];
    for r in 0..n {
        let x = data.row(r);
        for i in 0..d {
            for j in 0..d {
                s[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]) / n as f64;
            }
        }
    }
    s
}

fn gaussian_bound(data: &Matrix) -> f64 {
    let d = data.cols() as f64;
    -0.5 * (d * (LN_2PI + 1.0) + chol_logdet(&covariance(data)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn covariance_bound_matches_the_gaussian_fit(d in 1usize..=6, seed in 0u64..1000) {
        let data = correlated_gaussian(400, d, seed);
        let r = ppca_lmax(&data, DEFAULT_EPS).unwrap();
        let oracle = gaussian_bound(&data);
        prop_assert!((r.lmax_nats - oracle).abs() <= 1e-9 * oracle.abs().max(1.0), "{} vs {}", r.lmax_nats, oracle);
        prop_assert_eq!(r.floored, 0);
    }

    #[test]
    fn scaling_the_data_shifts_the_bound(d in 1usize..=5, seed in 0u64..1000, c in 0.1f64..10.0) {
        let data = correlated_gaussian(300, d, seed);
        let scaled = Matrix::new(data.rows(), d, data.data().iter().map(|v| v * c).collect()).unwrap();
        let a = ppca_lmax(&data, DEFAULT_EPS).unwrap().lmax_nats;
        let b = ppca_lmax(&scaled, DEFAULT_EPS).unwrap().lmax_nats;
        prop_assert!((a - b - d as f64 * c.ln()).abs() <= 1e-8 * a.abs().max(1.0));
    }

    #[test]
    fn stationary_point_is_orthogonally_invariant(d in 1usize..=6, seed in 0u64..1000) {
        let (s, u) = random_spd_and_orthogonal(d, seed);
        let (_, u2) = random_spd_and_orthogonal(d, seed + 7919);
        let w = qlf_stationary_w(&s, &u).unwrap();
        let w2 = qlf_stationary_w(&s, &u2).unwrap();
        let a = qlf_objective(&w, &s).unwrap();
        let b = qlf_objective(&w2, &s).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        let oracle = -0.5 * (d as f64 * (LN_2PI + 1.0) + chol_logdet(&(0..d).map(|r| s.row(r).to_vec()).collect::<Vec<_>>()));
        prop_assert!((a - oracle).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, oracle);
        let g = qlf_gradient(&w, &s).unwrap();
        prop_assert!(g.frobenius_norm() <= 1e-9 * w.frobenius_norm().max(1.0));
    }

    #[test]
    fn stationary_point_is_a_maximum(d in 1usize..=5, seed in 0u64..1000, dir in prop::collection::vec(-1.0f64..1.0, 25), t in 1e-3f64..0.3) {
        let (s, u) = random_spd_and_orthogonal(d, seed);
        let w = qlf_stationary_w(&s, &u).unwrap();
        let step = Matrix::new(d, d, dir[..d * d].iter().map(|v| v * t).collect()).unwrap();
        let moved = w.sub(&step);
        if let Ok(v) = qlf_objective(&moved, &s) {
            prop_assert!(v <= qlf_objective(&w, &s).unwrap() + 1e-12);
        }
    }

    #[test]
    fn hadamard_chain_holds(d in 1usize..=7, v in prop::collection::vec(-3.0f64..3.0, 49)) {
        let j = Matrix::new(d, d, v[..d * d].to_vec()).unwrap();
        let r = hadamard_audit(&j);
        prop_assert!(r.ok, "{:?}", r);
        prop_assert!(r.det.abs() <= r.col_bound * (1.0 + 1e-12) + 1e-12);
    }
}

#[test]
fn standard_normal_bound() {
    let data = Matrix::from_rows(&normal_points(100_000, 2, 3)).unwrap();
    let r = ppca_lmax(&data, DEFAULT_EPS).unwrap();
    assert!((r.lmax_nats + 2.837877).abs() < 0.02, "{}", r.lmax_nats);
}

#[test]
fn degenerate_data_is_rejected() {
    let data = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert_eq!(ppca_lmax(&data, DEFAULT_EPS), Err(FlowError::DegenerateData));
    assert!(qlf_per_point_report(&Matrix::zeros(0, 2), DEFAULT_EPS).is_err());
}

#[test]
fn per_point_bound_averages_rows() {
    let data = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap();
    let r = qlf_per_point_report(&data, 1e-6).unwrap();
    let one = |n2: f64| -0.5 * (2.0 * (LN_2PI + 1.0) + n2.ln() + 1e-6f64.ln());
    assert!((r.lmax_nats - 0.5 * (one(25.0) + one(1.0))).abs() < 1e-12);
    assert_eq!(r.floored, 2);
    assert!(r.eigenvalues.is_empty());
}

#[test]
fn trained_linear_flow_stays_below_its_bound() {
    let (ll, bound) = linear_flow_fit(20_000, 1500, 3, Exec::Sequential).unwrap();
    assert!(ll <= bound + 1e-6, "{ll} > {bound}");
    assert!(bound - ll < 5e-2, "gap {}", bound - ll);
}

#[test]
fn downstream_logdet_is_flagged() {
    let mut trace = TrainTrace::new(vec!["a".into(), "b".into(), "c".into()], 2, 0);
    for (step, ld) in [0.5, 3.0, 6.0].into_iter().enumerate() {
        trace.rows.push(TraceRow { step, nll_nats: 1.0, nll_bpd: 1.0, logdet: vec![9.0, ld, ld], variance: vec![1.0; 3], grad_norm: vec![0.1 * step as f64, 0.0, 0.0] });
    }
    let r = prop1_audit(&trace, 0, 5.0).unwrap();
    let downstream: Vec<f64> = r.rows.iter().map(|x| x.downstream_logdet).collect();
    assert_eq!(downstream, vec![1.0, 6.0, 12.0]);
    assert_eq!(r.first_flag, Some(1));
    assert!(prop1_audit(&trace, 3, 5.0).is_err());
    assert_eq!(prop1_audit(&TrainTrace::new(vec!["a".into()], 1, 0), 0, 5.0), Err(FlowError::EmptyTrace));
    let parsed = TrainTrace::from_csv(&trace.to_csv()).unwrap();
    assert_eq!(prop1_audit(&parsed, 0, 5.0).unwrap().rows, r.rows);
}
