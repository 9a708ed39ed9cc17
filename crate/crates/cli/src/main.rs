use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod output;

use commands::CliError;

#[derive(Parser)]
#[command(name = "flowdet", version, about = "Normalizing-flow density estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a `key = value` config file.
    Train {
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean negative log-likelihood of a dataset (CSV or image file).
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        /// Bit depth for bits/dim; defaults to the image file's depth, else 0.
        #[arg(long)]
        bit_depth: Option<u32>,
    },
    /// Draw samples at a temperature and write them as CSV (or PPM tiles for image models).
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
    },
    /// Density heatmap of a 2D model as PPM plus a CSV of raw values.
    Density2d {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 400)]
        grid: usize,
        /// Half-width of the square window centred at the origin.
        #[arg(long, default_value_t = 4.0)]
        window: f64,
        #[arg(long, default_value = "density.ppm")]
        out: PathBuf,
    },
    /// Closed-form likelihood bound of the quasi-linear family.
    QlfBound {
        data: PathBuf,
        /// `covariance` or `per_point`.
        #[arg(long, default_value = "covariance")]
        mode: String,
        #[arg(long, default_value_t = flowdet::qlf::DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        bit_depth: Option<u32>,
    },
    /// Downstream log-determinant versus gradient norm from a training trace.
    Diagnose {
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = flowdet::qlf::DEFAULT_PROP1_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep or redraw per-level latents of every input row and decode.
    Perturb {
        checkpoint: PathBuf,
        input: PathBuf,
        #[arg(long)]
        k: usize,
        /// `keep_first` or `resample_first`.
        #[arg(long, default_value = "keep_first")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value = "perturbed.csv")]
        out: PathBuf,
    },
    /// Run the invariant suite and print a per-property table.
    Check {
        /// Small budgets, for smoke testing.
        #[arg(long)]
        quick: bool,
        /// Only run properties whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, hide = true)]
        corrupt_knots: bool,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FLOWDET_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::input(format!("FLOWDET_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(CliError::input("FLOWDET_THREADS must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::input(e.to_string()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, out } => commands::train(&config, out.as_deref()),
        Command::Eval { checkpoint, data, bit_depth } => commands::eval(&checkpoint, &data, bit_depth),
        Command::Sample { checkpoint, n, temperature, seed, out } => commands::sample(&checkpoint, n, temperature, seed, &out),
        Command::Density2d { checkpoint, grid, window, out } => commands::density2d(&checkpoint, grid, window, &out),
        Command::QlfBound { data, mode, eps, bit_depth } => commands::qlf_bound(&data, &mode, eps, bit_depth),
        Command::Diagnose { trace, layer, threshold, out } => commands::diagnose(&trace, layer, threshold, out.as_deref()),
        Command::Perturb { checkpoint, input, k, mode, seed, temperature, out } => commands::perturb(&checkpoint, &input, k, &mode, seed, temperature, &out),
        Command::Check { quick, filter, corrupt_knots } => commands::check(quick, filter.as_deref(), corrupt_knots),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
