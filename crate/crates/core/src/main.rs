use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kfac2l::harness::{self, load_config, plot_logs, run_experiment, RunOptions};
use kfac2l::Error;

/// Natural-gradient training laboratory: KFAC and two-level KFAC
/// preconditioners for small networks.
#[derive(Parser)]
#[command(name = "kfac2l", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Maximum concurrent runs.
    #[arg(long, default_value_t = 1)]
    device_threads: usize,
    /// Record wall-clock columns (makes logs nondeterministic).
    #[arg(long)]
    timings: bool,
    /// Search the full {1e-4..1e4} x {1e-4..1e4} grid instead of the
    /// config's reduced grid.
    #[arg(long)]
    full_grid: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every optimizer in the config (grid searching entries without a
    /// pinned learning rate) and write CSV logs.
    Run(RunArgs),
    /// Grid search every optimizer in the config, even those with pinned
    /// hyperparameters.
    Grid(RunArgs),
    /// Render CSV logs as an SVG plot.
    Plot {
        /// CSV log files.
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        /// Output SVG path.
        #[arg(short, long)]
        output: PathBuf,
        /// Plot the gap trace (linear y over steps) instead of the loss
        /// curve (log y over epochs).
        #[arg(long)]
        gap: bool,
    },
    /// Check matrix-free Fisher products, KFAC solves, and coarse operators
    /// against explicit oracles on random networks.
    Selftest {
        /// Number of random instances.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Base seed for instance generation.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

const EXIT_RUN_FAILURE: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;

fn run_command(args: &RunArgs, force_grid: bool) -> ExitCode {
    let config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    };
    let opts = RunOptions {
        seed: args.seed,
        epochs: args.epochs,
        threads: args.device_threads.max(1),
        timings: args.timings,
        force_grid,
        full_grid: args.full_grid,
    };
    match run_experiment(&config, &opts) {
        Ok(outcomes) => {
            for o in &outcomes {
                println!("{}: wrote {}", o.method.tag(), o.csv_path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::RunFailed(_) | Error::Diverged { .. } | Error::NoViableConfig => {
                    ExitCode::from(EXIT_RUN_FAILURE)
                }
                _ => ExitCode::from(EXIT_BAD_CONFIG),
            }
        }
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run_command(&args, false),
        Command::Grid(args) => run_command(&args, true),
        Command::Plot { csvs, output, gap } => match plot_logs(&csvs, &output, gap) {
            Ok(()) => {
                println!("wrote {}", output.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_BAD_CONFIG)
            }
        },
        Command::Selftest { instances, seed } => {
            match harness::selftest::run(instances, seed) {
                Ok(report) => {
                    println!(
                        "selftest ok: {} instances, max errors: matvec {:.3e}, kfac {:.3e}, coarse {:.3e}",
                        report.instances, report.matvec_err, report.kfac_err, report.coarse_err
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("selftest failed: {e}");
                    ExitCode::from(EXIT_RUN_FAILURE)
                }
            }
        }
    }
}
