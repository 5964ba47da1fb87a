//! `mfc`: runs leader–follower control experiments from a TOML config and
//! writes CSV/JSON artefacts plus a manifest.
//!
//! Exit codes: 0 on success, 2 on configuration or usage errors, 1 when a
//! run fails numerically.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod artefacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser};

use crate::commands::Subcommand;
use crate::config::{default_config, load_config, to_toml, Scenario};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "mfc", version, about = "Leader-follower mean-field control experiments")]
struct Cli {
    /// Worker threads for Monte Carlo batches (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file overlaid on the defaults of its `scenario`.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Sample paths of the particle system under the initial control.
    Simulate(RunArgs),
    /// Open-loop Monte Carlo Newton solve.
    Optimize(RunArgs),
    /// Receding-horizon control of the particle system.
    Markov(RunArgs),
    /// Sample paths of the density–leader system under the initial control.
    Meanfield(RunArgs),
    /// Receding-horizon control of the density–leader system.
    MfOptimize(RunArgs),
    /// Coupled particle/mean-field convergence study.
    Chaos(RunArgs),
    /// Score-function gradient against central finite differences.
    CheckGradient(RunArgs),
    /// Print the defaults of a scenario as TOML.
    DefaultConfig {
        #[arg(value_enum)]
        scenario: Scenario,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Run(e.to_string()))?;
    }
    let (cmd, args) = match cli.command {
        Command::Simulate(a) => (Subcommand::Simulate, a),
        Command::Optimize(a) => (Subcommand::Optimize, a),
        Command::Markov(a) => (Subcommand::Markov, a),
        Command::Meanfield(a) => (Subcommand::MeanField, a),
        Command::MfOptimize(a) => (Subcommand::MfOptimize, a),
        Command::Chaos(a) => (Subcommand::Chaos, a),
        Command::CheckGradient(a) => (Subcommand::CheckGradient, a),
        Command::DefaultConfig { scenario } => {
            print!("{}", to_toml(&default_config(scenario)));
            return Ok(());
        }
    };
    let mut cfg = load_config(&args.config)?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    commands::run(cmd, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mfc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
