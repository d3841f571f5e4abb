//! `fxrl`: train fixed-point DDPG agents and run the accelerator model.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "fxrl",
    version,
    about = "Fixed-point DDPG with quantization-aware training and an accelerator model"
)]
struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes rewards.csv, checkpoint.bin and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        timesteps: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the cycle model; writes cycle_report.json.
    Sim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's policy without exploration noise.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dump one episode as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print a checkpoint header.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load(path: &Path, o: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(o);
    cfg.validate().map_err(|mut e| {
        e.path = Some(path.to_path_buf());
        e.message = format!("after command-line overrides: {}", e.message);
        e
    })?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            batch,
            timesteps,
            output,
        } => {
            let o = Overrides {
                seed,
                batch,
                timesteps,
                output_dir: output,
            };
            commands::train(&load(&config, &o)?, cli.quiet)
        }
        Command::Sim { config, batch, output } => {
            let o = Overrides {
                batch,
                output_dir: output,
                ..Overrides::default()
            };
            commands::sim(&load(&config, &o)?, cli.quiet).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            trace,
        } => commands::eval(&checkpoint, episodes, seed, trace.as_ref()).map(|_| ()),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<ConfigError>().is_some() {
                eprintln!("config error: {e}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        }
    }
}
