use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fringe_fcs::cli::{
    cmd_estimate, cmd_exact, cmd_fisher, cmd_sample, parse_config, workers_from_env, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "fringe-fcs",
    about = "Counting statistics of interfering condensate snapshots",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Run configuration (flat key = value file; empty file for defaults)
    #[arg(long)]
    config: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Override the configured RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured shot count
    #[arg(long)]
    shots: Option<u64>,
    /// Pin the hidden phase (radians) instead of drawing it per shot
    #[arg(long, value_name = "RADIANS", allow_hyphen_values = true)]
    pin_theta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact snapshot probabilities with oracle cross-checks
    Exact {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate snapshots, hidden phases and fringe images
    Sample {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit phases to an existing shots file and test uniformity
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        /// shots.csv produced by the sample command
        #[arg(long)]
        shots_file: PathBuf,
    },
    /// Cramer-Rao widths over a phase sweep plus the scaling table
    Fisher {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(common: &CommonArgs) -> fringe_fcs::Result<RunConfig> {
    let text = std::fs::read_to_string(&common.config)?;
    let mut config = parse_config(&text)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(shots) = common.shots {
        config.shots = shots;
    }
    if let Some(pin) = common.pin_theta {
        config.pin_theta = Some(pin);
    }
    Ok(config)
}

fn run() -> fringe_fcs::Result<()> {
    let cli = Cli::parse();
    let workers = workers_from_env();
    match &cli.command {
        Command::Exact { common } => {
            cmd_exact(&load_config(common)?, &common.out, workers)?;
        }
        Command::Sample { common } => {
            cmd_sample(&load_config(common)?, &common.out, workers)?;
        }
        Command::Estimate { common, shots_file } => {
            cmd_estimate(&load_config(common)?, shots_file, &common.out, workers)?;
        }
        Command::Fisher { common } => {
            cmd_fisher(&load_config(common)?, &common.out, workers)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("fringe-fcs: {err}");
            ExitCode::FAILURE
        }
    }
}
