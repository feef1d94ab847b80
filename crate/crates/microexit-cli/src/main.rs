//! `microexit`: drive the adaptive early-exit pipeline from the shell.
//!
//! The workflow is a chain of artifacts in one output directory: `synth`
//! or `preprocess` produce `segments.mxs`, `train` fits `model.mxw`,
//! `train-obp` fits `tree.mxt`, and `evaluate`, `cost`, and `cdln-sweep`
//! read whatever the earlier steps left behind. Every command is
//! deterministic given the same config and seed, down to the report bytes.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for data and
//! artifact problems, 4 for numerical aborts. Set `MICROEXIT_LOG=info`
//! (or `debug`) for progress logging.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "microexit", version, about = "Adaptive early-exit activity recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every seeded component (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact and report directory (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Dataset and cost profile name: `opportunity` or `whar` (overrides
    /// the config).
    #[arg(long, global = true, value_name = "NAME")]
    profile: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic segment file.
    Synth,
    /// Run the preprocessing pipeline on a raw recording CSV.
    Preprocess,
    /// Train the two-exit network on the segment file.
    Train,
    /// Fit the exit-routing tree against the trained network.
    TrainObp,
    /// Score the pure, routed, and threshold-gated inference variants.
    Evaluate,
    /// Emit the cost ledger and the energy-feasibility verdict.
    Cost,
    /// Score confidence-gated inference across a threshold sweep.
    CdlnSweep,
}

fn run(cli: Cli) -> microexit::Result<()> {
    let (config, config_bytes) = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => (PipelineConfig::default(), Vec::new()),
    };
    config.validate()?;

    let out = cli
        .out
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("artifacts"));
    std::fs::create_dir_all(&out)
        .map_err(|e| microexit::Error::Config(format!("cannot create output directory {}: {e}", out.display())))?;

    let ctx = commands::Ctx {
        seed: cli.seed.or(config.seed).unwrap_or(42),
        config,
        config_bytes,
        out,
        profile_flag: cli.profile,
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Preprocess => commands::preprocess(&ctx),
        Command::Train => commands::train_command(&ctx),
        Command::TrainObp => commands::train_obp(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Cost => commands::cost(&ctx),
        Command::CdlnSweep => commands::cdln_sweep(&ctx),
    }
}

/// Configuration, data, and numerical failures get distinct codes so
/// scripts can tell a bad invocation from bad input from a diverged run.
fn exit_code(error: &microexit::Error) -> u8 {
    use microexit::Error;
    match error {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MICROEXIT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}
