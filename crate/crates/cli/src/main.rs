use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use slsloc_cli::{apply_overrides, load_config, run_subcommand, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Strongest-beam RSS per cell
    RssMap,
    /// CRLB per cell
    CrlbMap,
    /// Monte-Carlo NLSE RMSE per cell
    NlseMap,
    /// Median RMSE and coverage summaries over n_list
    SweepN,
    /// RMSE CDFs over n_list
    Cdf,
    /// Fit sigma_db to the target median CRLBs
    Calibrate,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::RssMap => Subcommand::RssMap,
            Command::CrlbMap => Subcommand::CrlbMap,
            Command::NlseMap => Subcommand::NlseMap,
            Command::SweepN => Subcommand::SweepN,
            Command::Cdf => Subcommand::Cdf,
            Command::Calibrate => Subcommand::Calibrate,
        }
    }
}

/// Beam-sweep RSS positioning: bounds, estimator Monte-Carlo and calibration.
#[derive(Debug, Parser)]
#[command(name = "slsloc", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML configuration; absent keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Overrides master_seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the array size (and n_list for sweeps)
    #[arg(long)]
    n: Option<usize>,
    /// Worker threads; defaults to the available parallelism
    #[arg(long, env = "SLSLOC_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(threads) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("slsloc: cannot configure {threads} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = (|| {
        let mut cfg = match &args.config {
            Some(path) => load_config(path)?,
            None => Default::default(),
        };
        apply_overrides(&mut cfg, args.seed, args.n)?;
        run_subcommand(args.command.into(), &cfg, &args.out)
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slsloc: {e}");
            ExitCode::FAILURE
        }
    }
}
