use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use singflow::cli::{load_config, run_experiment, RunError, Status};

/// Run a named experiment from a JSON config.
#[derive(Parser, Debug)]
#[command(name = "singflow", version)]
struct Args {
    /// blowup, trajectories, density, nu-convergence, sampler-independence,
    /// srb-predict, self-similarity, perturbation or det-sensitivity
    experiment: String,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; takes precedence over OUTPUT_DIR and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    cfg.experiment = args.experiment;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.regularization.seed = seed;
    }
    let out = args
        .out
        .or_else(|| std::env::var_os("OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let started = Instant::now();
    match run_experiment(&cfg, &out) {
        Ok(report) => {
            print!("{}", report.to_text());
            eprintln!("finished in {:.1} s", started.elapsed().as_secs_f64());
            match report.status {
                Status::Pass => ExitCode::SUCCESS,
                Status::Fail => ExitCode::from(EXIT_FAIL),
            }
        }
        Err(e @ RunError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
