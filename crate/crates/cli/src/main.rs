use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use palm_blink_cli::commands::{run, Options};
use palm_blink_cli::config::Mode;

/// Simulate PALM recordings and estimate fluorophore blinking rates.
#[derive(Parser)]
#[command(name = "palm-blink", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a localization table and its ground truth.
    Simulate(Args),
    /// Fit the blinking model to a localization table.
    Fit(Args),
    /// Export the summary curves used by the fit.
    Summaries(Args),
    /// Simulate and refit replicates, then summarize the estimates.
    RefitStudy(Args),
    /// Evaluate the moment approximations at the configured rates.
    Moments(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Drop localizations at or before this time (s) and shift the rest.
    #[arg(long)]
    trim_start: Option<f64>,
    /// Overrides the seed of the config and of PALM_BLINK_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core); overrides PALM_BLINK_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Simulate(a) => (Mode::Simulate, a),
        Command::Fit(a) => (Mode::Fit, a),
        Command::Summaries(a) => (Mode::Summaries, a),
        Command::RefitStudy(a) => (Mode::RefitStudy, a),
        Command::Moments(a) => (Mode::Moments, a),
    };
    let opts = Options { config: args.config, trim_start: args.trim_start, seed: args.seed, threads: args.threads, out: args.out };
    match run(mode, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("palm-blink {}: {e}", mode.name());
            ExitCode::from(e.exit_code())
        }
    }
}
