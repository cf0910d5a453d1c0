//! Experiment runner CLI: one subcommand per analysis.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 1 on runtime errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use forgetlab::experiment::{run_command, set_jobs, ExperimentConfig};

#[derive(Parser)]
#[command(name = "forgetlab", version, about = "Catastrophic-forgetting analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker thread cap for parallel sweep cells and decoding.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Reuse a stable run directory instead of a timestamped one.
    #[arg(long, default_value_t = false)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train on G, continually train on I, emit the dual-domain BLEU trend.
    Forgetting(Common),
    /// Freeze/update sweep over module groups.
    Modules(Common),
    /// Taylor importance maps and heatmaps for both domains.
    Importance(Common),
    /// Parameter-erasure curves in both orderings.
    Erasure(Common),
    /// Importance-decile parameter drift across continual training.
    Drift(Common),
}

impl Command {
    fn split(&self) -> (&'static str, &Common) {
        match self {
            Command::Forgetting(c) => ("forgetting", c),
            Command::Modules(c) => ("modules", c),
            Command::Importance(c) => ("importance", c),
            Command::Erasure(c) => ("erasure", c),
            Command::Drift(c) => ("drift", c),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = cli.command.split();
    let cfg = match ExperimentConfig::load(&common.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    set_jobs(common.jobs);
    match run_command(name, &cfg, common.overwrite) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
