use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stlab_cli::commands::{
    cmd_compare, cmd_diagnose, cmd_permtest, cmd_plotdata, cmd_run, cmd_synth, resolve_out,
};
use stlab_cli::config::{ExperimentConfig, TEMPLATE};
use stlab_core::error::Result;

#[derive(Parser)]
#[command(name = "stlab", about = "Spatio-temporal forecasting laboratory", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate the configured models over blocked folds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: STLAB_OUT, then the config, then ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the suite on original and spatially permuted data and compare.
    Permtest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Spatial autocorrelation and temporal-shape diagnostics of a dataset.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statistical comparison across one or more folds.csv files.
    Compare {
        /// Result files (folds.csv) with aligned fold columns.
        #[arg(required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Long-format RMSE rows plus mean/median annotations for plotting.
    Plotdata {
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset as CSV files.
    Synth {
        #[arg(long)]
        s: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        corr_len: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        coords: PathBuf,
    },
    /// Print an annotated configuration template.
    Template,
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cmd: Cmd) -> Result<usize> {
    match cmd {
        Cmd::Run { config, out, jobs, seed } => {
            let cfg = load(&config, seed)?;
            let dir = resolve_out(out, cfg.out_dir.as_ref());
            cmd_run(&cfg, &dir, jobs)
        }
        Cmd::Permtest { config, out, jobs, seed } => {
            let cfg = load(&config, seed)?;
            let dir = resolve_out(out, cfg.out_dir.as_ref());
            cmd_permtest(&cfg, &dir, jobs)
        }
        Cmd::Diagnose { config, out } => {
            let cfg = load(&config, None)?;
            let dir = resolve_out(out, cfg.out_dir.as_ref());
            cmd_diagnose(&cfg, &dir).map(|()| 0)
        }
        Cmd::Compare { results, alpha, out } => {
            let dir = resolve_out(out, None);
            cmd_compare(&results, alpha, &dir).map(|()| 0)
        }
        Cmd::Plotdata { results, out } => {
            let dir = resolve_out(out, None);
            cmd_plotdata(&results, &dir).map(|()| 0)
        }
        Cmd::Synth { s, n, corr_len, seed, data, coords } => {
            cmd_synth(s, n, corr_len, seed, &data, &coords).map(|()| 0)
        }
        Cmd::Template => {
            print!("{TEMPLATE}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(diverged) => {
            eprintln!("{diverged} fold(s) diverged; metrics recorded as NaN");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
