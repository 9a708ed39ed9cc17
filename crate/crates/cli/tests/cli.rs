use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use flowdet::check::normal_points;
use flowdet::flow::checkpoint::load_checkpoint;
use flowdet::training::data::{correlated_gaussian, write_csv};
use flowdet::training::trace::TrainTrace;
use flowdet::{Bijector, Matrix};
use tempfile::TempDir;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn flowdet(args: &[&str], envs: &[(&str, &str)]) -> Out {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowdet"));
    cmd.args(args).env_remove("FLOWDET_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let o = cmd.output().expect("binary runs");
    Out { code: o.status.code().unwrap_or(-1), stdout: String::from_utf8_lossy(&o.stdout).into(), stderr: String::from_utf8_lossy(&o.stderr).into() }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn kv(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.trim_start().strip_prefix('=')).map(|v| v.trim().parse::<f64>().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{text}"))
}

/// Trains `config` into `dir/name` and returns that directory.
fn train(dir: &TempDir, name: &str, config: &str) -> PathBuf {
    let cfg = dir.path().join(format!("{name}.cfg"));
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join(name);
    let r = flowdet(&["train", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    out
}

fn write_matrix(dir: &TempDir, name: &str, m: &Matrix) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, write_csv(m)).unwrap();
    p
}

const TINY: &str = "hidden = 4\nbins = 4\nn = 300\n";

#[test]
fn zero_steps_write_the_initial_model() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, "zero", &format!("{TINY}steps = 0\nseed = 3\n"));
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
    assert!(trace.starts_with("nll_nats,nll_bpd,logdet_0,var_0,gradnorm_0"));
    let (cfg, model) = load_checkpoint(&fs::read(run.join("checkpoint.bin")).unwrap()).unwrap();
    let fresh = cfg.build().unwrap();
    let a: Vec<f64> = model.layers().flat_map(|l| l.params().to_vec()).collect();
    let b: Vec<f64> = fresh.layers().flat_map(|l| l.params().to_vec()).collect();
    assert_eq!(a, b);
    assert!(run.join("config.txt").exists() && run.join("events.log").exists());
}

#[test]
fn initial_step_is_volume_preserving() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, "beta", &format!("{TINY}steps = 1\nbeta = 0.5\n"));
    let trace = TrainTrace::from_csv(&fs::read_to_string(run.join("trace.csv")).unwrap()).unwrap();
    assert_eq!(trace.rows.len(), 1);
    assert!(trace.rows[0].total_logdet().abs() <= 1e-9, "{}", trace.rows[0].total_logdet());
}

#[test]
fn config_errors_name_the_line() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "steps = 5\nwobble = 3\n").unwrap();
    let r = flowdet(&["train", s(&cfg)], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("line 2") && r.stderr.contains("wobble"), "{}", r.stderr);
    fs::write(&cfg, "beta = 0.2\n").unwrap();
    assert_eq!(flowdet(&["train", s(&cfg)], &[]).code, 1);
    assert_eq!(flowdet(&["train", s(&dir.path().join("missing.cfg"))], &[]).code, 1);
}

#[test]
fn identity_models_evaluate_in_closed_form() {
    let dir = TempDir::new().unwrap();
    let uni = train(&dir, "uni", &format!("{TINY}steps = 0\nbase = uniform\n"));
    let pts = Matrix::new(3, 2, vec![0.1, 0.2, 0.5, 0.5, 0.9, 0.3]).unwrap();
    let data = write_matrix(&dir, "unit.csv", &pts);
    let r = flowdet(&["eval", s(&uni.join("checkpoint.bin")), s(&data)], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(kv(&r.stdout, "nll_nats"), 0.0);

    let norm = train(&dir, "norm", &format!("{TINY}steps = 0\n"));
    let data = write_matrix(&dir, "normal.csv", &Matrix::from_rows(&normal_points(100_000, 2, 1)).unwrap());
    let r = flowdet(&["eval", s(&norm.join("checkpoint.bin")), s(&data)], &[]);
    let expect = (2.0 * std::f64::consts::PI).ln() + 1.0;
    assert!((kv(&r.stdout, "nll_nats") - expect).abs() < 0.02, "{}", r.stdout);
    assert_eq!(kv(&r.stdout, "n"), 100_000.0);

    let wrong = write_matrix(&dir, "three.csv", &Matrix::zeros(2, 3));
    assert_eq!(flowdet(&["eval", s(&norm.join("checkpoint.bin")), s(&wrong)], &[]).code, 1);
}

#[test]
fn trained_linear_flow_respects_the_bound() {
    let dir = TempDir::new().unwrap();
    let data = write_matrix(&dir, "cg.csv", &correlated_gaussian(20_000, 4, 2));
    let run = train(&dir, "lin", &format!("model = linear\nshape = 4\ndataset = csv\ndata_path = {}\nsteps = 1500\nbatch_size = 512\ndecay_steps = 1500\n", data.display()));
    let ev = flowdet(&["eval", s(&run.join("checkpoint.bin")), s(&data)], &[]);
    let bound = flowdet(&["qlf-bound", s(&data)], &[]);
    assert_eq!(bound.code, 0, "{}", bound.stderr);
    let ll = -kv(&ev.stdout, "nll_nats");
    let lmax = kv(&bound.stdout, "lmax_nats");
    assert!(ll <= lmax + 1e-6, "{ll} > {lmax}");
    assert!(lmax - ll < 5e-2, "gap {}", lmax - ll);
}

#[test]
fn qlf_bound_modes() {
    let dir = TempDir::new().unwrap();
    let data = write_matrix(&dir, "n.csv", &Matrix::from_rows(&normal_points(100_000, 2, 4)).unwrap());
    let r = flowdet(&["qlf-bound", s(&data)], &[]);
    assert!((kv(&r.stdout, "lmax_nats") + 2.837877).abs() < 0.02);
    assert!(r.stdout.contains("mode = covariance"));
    let pp = flowdet(&["qlf-bound", s(&data), "--mode", "per_point"], &[]);
    assert_eq!(pp.code, 0);
    assert_eq!(kv(&pp.stdout, "floored"), 100_000.0);
    let bits = flowdet(&["qlf-bound", s(&data), "--bit-depth", "8"], &[]);
    assert!((kv(&bits.stdout, "lmax_bpd") - kv(&r.stdout, "lmax_bpd") - 8.0).abs() < 1e-9);
    let flat = write_matrix(&dir, "flat.csv", &Matrix::new(3, 2, vec![1.0; 6]).unwrap());
    assert_eq!(flowdet(&["qlf-bound", s(&flat)], &[]).code, 1);
    assert_eq!(flowdet(&["qlf-bound", s(&data), "--mode", "other"], &[]).code, 1);
}

#[test]
fn density_map_of_the_identity() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, "id", &format!("{TINY}steps = 0\n"));
    let ppm = dir.path().join("d.ppm");
    let r = flowdet(&["density2d", s(&run.join("checkpoint.bin")), "--grid", "41", "--out", s(&ppm)], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!((kv(&r.stdout, "riemann_sum") - 1.0).abs() < 1e-2);
    let img = fs::read(&ppm).unwrap();
    let header = b"P6\n41 41\n255\n";
    assert!(img.starts_with(header));
    let px = &img[header.len()..];
    assert_eq!(px.len(), 41 * 41 * 3);
    let bright = |i: usize| px[3 * i] as u32 + px[3 * i + 1] as u32 + px[3 * i + 2] as u32;
    let best = (0..41 * 41).max_by_key(|i| (bright(*i), std::cmp::Reverse(*i))).unwrap();
    assert_eq!((best / 41, best % 41), (20, 20));
    let csv = fs::read_to_string(ppm.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 41 * 41 + 1);

    let four = train(&dir, "four", &format!("{TINY}steps = 0\nshape = 4\ndataset = correlated_gaussian\n"));
    let r = flowdet(&["density2d", s(&four.join("checkpoint.bin"))], &[]);
    assert_eq!(r.code, 1);
}

#[test]
fn perturbation_levels() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, "img", "shape = 4,4,1\nlevels = 2\nk = 2\nblocks_per_level = 1\nhidden = 4\nbins = 4\ndataset = synthetic_images\nn = 200\nsteps = 5\nbatch_size = 32\n");
    let input = write_matrix(&dir, "in.csv", &Matrix::new(4, 16, normal_points(4, 16, 2).concat().iter().map(|v| 0.5 + 0.1 * v).collect()).unwrap());
    let ck = run.join("checkpoint.bin");
    let out = dir.path().join("p.csv");
    let all = flowdet(&["perturb", s(&ck), s(&input), "--k", "2", "--out", s(&out)], &[]);
    assert_eq!(all.code, 0, "{}", all.stderr);
    assert!(kv(&all.stdout, "mean_max_abs_error") < 1e-9);
    let none = flowdet(&["perturb", s(&ck), s(&input), "--k", "0", "--out", s(&out)], &[]);
    assert!(kv(&none.stdout, "mean_max_abs_error") > 1e-3);
    let r = flowdet(&["perturb", s(&ck), s(&input), "--k", "3"], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("out of range"));
    assert_eq!(flowdet(&["perturb", s(&ck), s(&input), "--k", "1", "--mode", "shuffle"], &[]).code, 1);
    let rs = flowdet(&["perturb", s(&ck), s(&input), "--k", "2", "--mode", "resample_first", "--out", s(&out)], &[]);
    assert!(kv(&rs.stdout, "mean_max_abs_error") > 1e-3);
}

#[test]
fn diagnose_reads_a_trace() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, "diag", &format!("{TINY}steps = 20\n"));
    let trace = run.join("trace.csv");
    let r = flowdet(&["diagnose", s(&trace), "--layer", "0"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.starts_with("step,downstream_logdet,grad_norm,flagged\n"));
    assert_eq!(r.stdout.lines().count(), 21);
    assert_eq!(flowdet(&["diagnose", s(&trace), "--layer", "99"], &[]).code, 1);
    let empty = train(&dir, "empty", &format!("{TINY}steps = 0\n"));
    assert_eq!(flowdet(&["diagnose", s(&empty.join("trace.csv"))], &[]).code, 1);
}

#[test]
fn runs_are_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{TINY}steps = 15\nseed = 9\neval_every = 5\n");
    let a = train(&dir, "a", &cfg);
    let b = train(&dir, "b", &cfg);
    for f in ["checkpoint.bin", "trace.csv", "heldout.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let echo = fs::read_to_string(a.join("config.txt")).unwrap();
    let c = train(&dir, "c", &echo);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(c.join("checkpoint.bin")).unwrap());
    let t1 = dir.path().join("t1.csv");
    let t2 = dir.path().join("t2.csv");
    let ck = a.join("checkpoint.bin");
    flowdet(&["sample", s(&ck), "--n", "7", "--seed", "2", "--out", s(&t1)], &[]);
    flowdet(&["sample", s(&ck), "--n", "7", "--seed", "2", "--out", s(&t2)], &[("FLOWDET_THREADS", "1")]);
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t2).unwrap());
    assert_eq!(fs::read_to_string(&t1).unwrap().lines().count(), 7);
}

#[test]
fn divergence_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let data = write_matrix(&dir, "huge.csv", &Matrix::new(10, 2, vec![1e300; 20]).unwrap());
    let cfg = dir.path().join("h.cfg");
    fs::write(&cfg, format!("{TINY}dataset = csv\ndata_path = {}\nsteps = 50\nbatch_size = 2\n", data.display())).unwrap();
    let r = flowdet(&["train", s(&cfg), "--out", s(&dir.path().join("h"))], &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(fs::read_to_string(dir.path().join("h/events.log")).unwrap().contains("diverged"));
}

#[test]
fn thread_count_is_validated() {
    for bad in ["0", "many"] {
        let r = flowdet(&["check", "--quick", "--filter", "hadamard"], &[("FLOWDET_THREADS", bad)]);
        assert_eq!(r.code, 1, "{bad}");
        assert!(r.stderr.contains("FLOWDET_THREADS"));
    }
    assert_eq!(flowdet(&["check", "--quick", "--filter", "hadamard"], &[("FLOWDET_THREADS", "2")]).code, 0);
}

#[test]
fn check_reports_failures() {
    let ok = flowdet(&["check", "--quick", "--filter", "spline_round_trip"], &[]);
    assert_eq!(ok.code, 0, "{}", ok.stderr);
    assert!(ok.stdout.contains("spline_round_trip") && ok.stdout.contains("PASS"));
    let bad = flowdet(&["check", "--quick", "--corrupt-knots", "--filter", "spline_round_trip"], &[]);
    assert_eq!(bad.code, 3);
    assert!(bad.stderr.contains("invariant failed: spline_round_trip"), "{}", bad.stderr);
    assert_eq!(flowdet(&["check", "--filter", "no_such_property"], &[]).code, 1);
}
