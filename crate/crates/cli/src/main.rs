//! `ersatz`: command-line front end for the ersatz-equation solver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ersatz_cli::commands::{self, DecomposeArgs, RunOptions};
use ersatz_cli::config;
use ersatz_cli::error::{self, CliError};

#[derive(Parser)]
#[command(name = "ersatz", version, about = "Monotone finite-difference solver for ersatz parabolic equations")]
struct Cli {
    /// Worker threads for the parallel backend.
    #[arg(long, global = true, env = "ERSATZ_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one configuration and measure the estimates.
    Solve(RunArgs),
    /// Solve for every K in params.K_list and compare consecutive solutions.
    SweepK(RunArgs),
    /// Solve on every h in grid.h_list and tabulate differences and estimates.
    RefineH(RunArgs),
    /// Run the assumption checkers, then solve and run the property suites.
    Verify(RunArgs),
    /// Decompose a symmetric matrix along the stencil.
    Decompose(DecomposeCli),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DecomposeCli {
    /// Rows separated by ';', entries by ',', e.g. "1,0;0,1".
    #[arg(long, allow_hyphen_values = true)]
    matrix: String,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    /// Omit to search for a feasible value.
    #[arg(long)]
    hat_delta: Option<f64>,
    #[arg(long, default_value_t = 1)]
    radius: i64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::new("invalid-parameter", "--threads must be at least 1", error::EXIT_VALIDATION));
        }
        ersatz_core::exec::configure_threads(n);
    }
    let run_with = |args: RunArgs, f: fn(config::LoadedConfig, &RunOptions) -> Result<(), CliError>| {
        let loaded = commands::load(&args.config)?;
        f(loaded, &RunOptions { out: args.out, seed: args.seed })
    };
    match cli.command {
        Command::Solve(a) => run_with(a, commands::cmd_solve),
        Command::SweepK(a) => run_with(a, commands::cmd_sweep_k),
        Command::RefineH(a) => run_with(a, commands::cmd_refine_h),
        Command::Verify(a) => run_with(a, commands::cmd_verify),
        Command::Decompose(a) => {
            let text = commands::cmd_decompose(&DecomposeArgs {
                matrix: a.matrix,
                delta: a.delta,
                hat_delta: a.hat_delta,
                radius: a.radius,
            })?;
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
