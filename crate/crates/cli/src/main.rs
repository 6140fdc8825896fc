//! `xvloc`: simulate scenes, localize ground views against aerial grids, and
//! run the evaluation experiments. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

mod args;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::args::{Factors, SeedRange};
use xvloc::experiments::AblationMode;

#[derive(Debug, Parser)]
#[command(name = "xvloc", version, about = "Scale-aware cross-view localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes and write their grids, depth maps and truth.
    Simulate {
        /// Scene config (TOML, `[scene]` table); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "0..1")]
        seeds: SeedRange,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the pose of one ground view.
    Solve {
        #[arg(long)]
        aerial: PathBuf,
        #[arg(long)]
        ground: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        /// Reject outliers with RANSAC before the final fit.
        #[arg(long)]
        ransac: bool,
        #[arg(long, default_value_t = 1.0)]
        initial_scale: f64,
        /// Depth cut-off in the depth map's units.
        #[arg(long)]
        max_depth: Option<f64>,
        /// Correspondences sampled from the match probabilities.
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        /// `truth.json` written by `simulate`; adds errors to the results.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rescale depths by each factor and report how far the pose moves.
    SweepScale {
        #[arg(long, default_value = "0.001..1000")]
        factors: Factors,
        /// Number of log-spaced factors for a `LO..HI` range.
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long, default_value = "0..10")]
        seeds: SeedRange,
        /// Experiment config (TOML, `[scene]` and `[pipeline]` tables).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare pipeline variants on the same scenes.
    Ablate {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value = "0..50")]
        seeds: SeedRange,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the feature projection on simulated scenes.
    Train {
        /// Training config (TOML, `scenes`, `[scene]` and `[train]`).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "0..50")]
        seeds: SeedRange,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize the pose errors stored in a results file.
    Metrics {
        #[arg(long)]
        results: PathBuf,
        /// Comma-separated localization recall thresholds, meters.
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        meters: Vec<f64>,
        /// Comma-separated orientation recall thresholds, degrees.
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        degrees: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export overlay points of a results file as CSV.
    Overlay {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Mode {
    TopPoints,
    NoScale,
    #[value(name = "N", alias = "n")]
    N,
    Grid,
}

impl From<Mode> for AblationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::TopPoints => AblationMode::TopPoints,
            Mode::NoScale => AblationMode::NoScale,
            Mode::N => AblationMode::N,
            Mode::Grid => AblationMode::Grid,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::Simulate { config, seeds, out } => simulate(config.as_deref(), &seeds, &out),
        Command::Solve {
            aerial,
            ground,
            depth,
            ransac,
            initial_scale,
            max_depth,
            n,
            tau,
            truth,
            out,
        } => solve(
            &SolveArgs {
                aerial,
                ground,
                depth,
                truth,
                ransac,
                initial_scale,
                max_depth,
                n,
                tau,
            },
            &out,
        ),
        Command::SweepScale {
            factors,
            steps,
            seeds,
            config,
            out,
        } => sweep_scale(&factors, steps, &seeds, config.as_deref(), out.as_deref()),
        Command::Ablate { mode, seeds, config, out } => ablate(mode.into(), &seeds, config.as_deref(), out.as_deref()),
        Command::Train { config, out } => train(&config, out.as_deref()),
        Command::Gradcheck { seeds, tol, eps, out } => gradcheck(&seeds, tol, eps, out.as_deref()),
        Command::Metrics {
            results,
            meters,
            degrees,
            out,
        } => metrics(&results, meters, degrees, out.as_deref()),
        Command::Overlay { results, out } => overlay(&results, &out),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
