use std::fs;
use std::path::{Path, PathBuf};

use flowdet::check::{run_suite, SuiteOptions};
use flowdet::flow::checkpoint::{load_checkpoint, save_checkpoint};
use flowdet::flow::perturb::{max_abs_diff, perturb as perturb_rows, PerturbMode};
use flowdet::linalg::Matrix;
use flowdet::qlf::{ppca_lmax, prop1_audit, qlf_per_point_report, BoundMode};
use flowdet::training::data::{images_to_matrix, load_dataset, read_csv, split_heldout, write_csv, ImageSet};
use flowdet::training::trace::TrainTrace;
use flowdet::training::trainer::train as train_model;
use flowdet::{nll_bits_per_dim, Exec, FlowError, FlowModel, ModelConfig, RunConfig};

use crate::output::{heat, ppm, tile_images};

pub const EXIT_INPUT: u8 = 1;
pub const EXIT_DIVERGED: u8 = 2;
pub const EXIT_INVARIANT: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, msg: msg.into() }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        CliError::input(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<(ModelConfig, FlowModel)> {
    Ok(load_checkpoint(&read_bytes(path)?)?)
}

/// Reads a CSV of rows, or a raw image file; returns the rows and the bit
/// depth of the file (0 for CSV).
fn read_data(path: &Path) -> Result<(Matrix, u32)> {
    let bytes = read_bytes(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let text = String::from_utf8(bytes).map_err(|_| CliError::input(format!("{} is not UTF-8", path.display())))?;
        return Ok((read_csv(&text)?, 0));
    }
    let set = ImageSet::from_bytes(&bytes)?;
    Ok(images_to_matrix(&set, 0)?)
}

fn check_dim(model: &FlowModel, data: &Matrix) -> Result<()> {
    if data.cols() != model.dim() {
        return Err(CliError::input(format!("data has {} dimensions, model expects {}", data.cols(), model.dim())));
    }
    Ok(())
}

fn is_image(cfg: &ModelConfig) -> bool {
    cfg.shape.h > 1 || cfg.shape.w > 1
}

fn wants_ppm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

pub fn train(config: &Path, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| CliError::input(format!("cannot read {}: {e}", config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(o) = out {
        cfg.out_dir = Some(o.display().to_string());
    }
    let dir = PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| "flowdet_run".into()));
    let (data, bits) = load_dataset(&cfg.data, cfg.model.shape)?;
    if cfg.train.bit_depth == 0 {
        cfg.train.bit_depth = bits;
    }
    write_file(&dir.join("config.txt"), cfg.to_kv())?;

    let (train_set, heldout) = split_heldout(&data);
    let mut model = cfg.model.build()?;
    let held = (cfg.train.eval_every > 0 && heldout.rows() > 0).then_some(&heldout);
    let outcome = train_model(&mut model, &cfg.train, &cfg.backprop_options(), &train_set, held, Exec::default())?;

    write_file(&dir.join("checkpoint.bin"), save_checkpoint(&cfg.model, &model))?;
    write_file(&dir.join("trace.csv"), outcome.trace.to_csv())?;
    write_file(&dir.join("events.log"), outcome.trace.events_log())?;
    if !outcome.heldout.is_empty() {
        let csv: String = std::iter::once("step,heldout_nll_nats\n".to_string())
            .chain(outcome.heldout.iter().map(|(s, v)| format!("{s},{v:?}\n")))
            .collect();
        write_file(&dir.join("heldout.csv"), csv)?;
    }
    let rows = &outcome.trace.rows;
    println!("steps = {}", rows.len());
    if let Some(last) = rows.last() {
        println!("final_batch_nll_nats = {:.6}", last.nll_nats);
        println!("final_batch_nll_bpd = {:.6}", last.nll_bpd);
    }
    if let Some((_, v)) = outcome.heldout.last() {
        println!("heldout_nll_nats = {v:.6}");
    }
    println!("out_dir = {}", dir.display());
    if let Some(step) = outcome.diverged_at {
        return Err(CliError { code: EXIT_DIVERGED, msg: format!("training diverged at step {step}") });
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, bit_depth: Option<u32>) -> Result<()> {
    let (_, model) = load_model(checkpoint)?;
    let (x, bits) = read_data(data)?;
    check_dim(&model, &x)?;
    let ll = model.mean_log_likelihood(&x, Exec::default())?;
    let nats = -ll;
    println!("n = {}", x.rows());
    println!("nll_nats = {nats:.10}");
    println!("nll_bpd = {:.10}", nll_bits_per_dim(ll, model.dim(), bit_depth.unwrap_or(bits)));
    Ok(())
}

pub fn sample(checkpoint: &Path, n: usize, temperature: f64, seed: u64, out: &Path) -> Result<()> {
    let (cfg, model) = load_model(checkpoint)?;
    let samples = model.sample(n, temperature, seed, Exec::default())?;
    if wants_ppm(out) && is_image(&cfg) {
        write_file(out, tile_images(&samples, cfg.shape.h, cfg.shape.w, cfg.shape.c))?;
    } else {
        write_file(out, write_csv(&samples))?;
    }
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

/// Densities on the cell centres of a `grid x grid` lattice over
/// `[-window, window]²`, top row first.
pub fn density_grid(model: &FlowModel, grid: usize, window: f64) -> Vec<(f64, f64, f64)> {
    let h = 2.0 * window / grid as f64;
    let points: Vec<(f64, f64)> = (0..grid * grid)
        .map(|k| {
            let (r, c) = (k / grid, k % grid);
            (-window + (c as f64 + 0.5) * h, window - (r as f64 + 0.5) * h)
        })
        .collect();
    let dens = Exec::default().map(points.len(), |k| {
        let (x, y) = points[k];
        model.log_likelihood(&[x, y]).map(f64::exp).unwrap_or(0.0)
    });
    points.into_iter().zip(dens).map(|((x, y), p)| (x, y, p)).collect()
}

pub fn density2d(checkpoint: &Path, grid: usize, window: f64, out: &Path) -> Result<()> {
    let (_, model) = load_model(checkpoint)?;
    if model.dim() != 2 {
        return Err(CliError::input(format!("density2d needs a 2D model, this one has d = {}", model.dim())));
    }
    if grid == 0 || !(window > 0.0) {
        return Err(CliError::input("grid and window must be positive"));
    }
    let cells = density_grid(&model, grid, window);
    let max = cells.iter().map(|c| c.2).fold(0.0, f64::max);
    let px: Vec<[u8; 3]> = cells.iter().map(|c| heat(if max > 0.0 { c.2 / max } else { 0.0 })).collect();
    write_file(out, ppm(grid, grid, &px))?;
    let mut csv = String::from("x,y,density\n");
    for (x, y, p) in &cells {
        csv.push_str(&format!("{x:?},{y:?},{p:?}\n"));
    }
    let csv_path = out.with_extension("csv");
    write_file(&csv_path, csv)?;
    let cell = (2.0 * window / grid as f64).powi(2);
    println!("riemann_sum = {:.6}", cells.iter().map(|c| c.2).sum::<f64>() * cell);
    println!("wrote {} and {}", out.display(), csv_path.display());
    Ok(())
}

pub fn qlf_bound(data: &Path, mode: &str, eps: f64, bit_depth: Option<u32>) -> Result<()> {
    let (x, bits) = read_data(data)?;
    let mode = match mode {
        "covariance" => BoundMode::Covariance,
        "per_point" => BoundMode::PerPoint,
        other => return Err(CliError::input(format!("unknown mode `{other}` (expected covariance or per_point)"))),
    };
    if !(eps > 0.0) {
        return Err(CliError::input("eps must be positive"));
    }
    let report = match mode {
        BoundMode::Covariance => ppca_lmax(&x, eps)?,
        BoundMode::PerPoint => qlf_per_point_report(&x, eps)?,
    };
    print!("{}", report.with_bit_depth(bit_depth.unwrap_or(bits)).to_kv());
    Ok(())
}

pub fn diagnose(trace: &Path, layer: usize, threshold: f64, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(trace).map_err(|e| CliError::input(format!("cannot read {}: {e}", trace.display())))?;
    let report = prop1_audit(&TrainTrace::from_csv(&text)?, layer, threshold)?;
    match out {
        Some(p) => write_file(p, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    match report.first_flag {
        Some(s) => eprintln!("downstream log-determinant first exceeds {threshold} at step {s}"),
        None => eprintln!("downstream log-determinant never exceeds {threshold}"),
    }
    Ok(())
}

pub fn perturb(checkpoint: &Path, input: &Path, k: usize, mode: &str, seed: u64, temperature: f64, out: &Path) -> Result<()> {
    let (cfg, model) = load_model(checkpoint)?;
    let mode: PerturbMode = mode.parse().map_err(|_| CliError::input(format!("unknown mode `{mode}` (expected keep_first or resample_first)")))?;
    let levels = model.levels().len();
    if k > levels {
        return Err(CliError::input(format!("k = {k} out of range [0, {levels}]")));
    }
    let (x, _) = read_data(input)?;
    check_dim(&model, &x)?;
    let rows: Vec<Vec<f64>> = Exec::default()
        .map(x.rows(), |i| perturb_rows(&model, x.row(i), k, mode, temperature, seed.wrapping_add(i as u64)))
        .into_iter()
        .collect::<flowdet::Result<_>>()?;
    let err = rows.iter().enumerate().map(|(i, r)| max_abs_diff(r, x.row(i))).sum::<f64>() / rows.len().max(1) as f64;
    let result = Matrix::new(rows.len(), model.dim(), rows.concat())?;
    if wants_ppm(out) && is_image(&cfg) {
        write_file(out, tile_images(&result, cfg.shape.h, cfg.shape.w, cfg.shape.c))?;
    } else {
        write_file(out, write_csv(&result))?;
    }
    println!("mode = {}", mode.name());
    println!("k = {k}");
    println!("mean_max_abs_error = {err:e}");
    Ok(())
}

pub fn check(quick: bool, filter: Option<&str>, corrupt_knots: bool) -> Result<()> {
    let base = if quick { SuiteOptions::quick() } else { SuiteOptions::full() };
    let opts = SuiteOptions { corrupt_knots, ..base };
    let report = run_suite(&opts, filter, |r| eprintln!("{:<22} {}", r.name, if r.passed { "PASS" } else { "FAIL" }));
    print!("{}", report.table());
    let total: f64 = report.results.iter().map(|r| r.seconds).sum();
    println!("total seconds: {total:.1}");
    match report.first_failure() {
        Some(r) => Err(CliError { code: EXIT_INVARIANT, msg: format!("invariant failed: {}", r.name) }),
        None if report.results.is_empty() => Err(CliError::input("no property matches the filter")),
        None => Ok(()),
    }
}
