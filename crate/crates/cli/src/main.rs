//! `holderpo`: compute Hölder means, train and sweep the desk-scale tasks,
//! and run the property checks.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 verification failure,
//! 3 divergence abort.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "holderpo",
    version,
    about = "Hölder-mean policy optimization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Hölder mean, gradient weights, weight entropy and HHI of a ratio sequence.
    Mean {
        /// Comma-separated positive ratios.
        #[arg(long, conflicts_with = "ratios_file", allow_hyphen_values = true)]
        ratios: Option<String>,
        /// File of ratios separated by commas or whitespace.
        #[arg(long)]
        ratios_file: Option<PathBuf>,
        /// Orders to evaluate; repeat the flag or separate values with commas.
        #[arg(
            long = "p",
            required = true,
            value_delimiter = ',',
            allow_negative_numbers = true
        )]
        p: Vec<f64>,
    },
    /// Train one run from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `training.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
    },
    /// Train every (p or schedule, seed) pair and tabulate final success.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `sweep.p_list`.
        #[arg(long = "p", value_delimiter = ',', allow_negative_numbers = true)]
        p: Vec<f64>,
        /// Runs a single seed instead of `sweep.seeds`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/sweep")]
        out_dir: PathBuf,
    },
    /// Run the property checks and print a report.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Run only the named check.
        #[arg(long)]
        only: Option<String>,
        /// Also write report.json and report.txt here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Print the JSON report instead of text.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                commands::EXIT_USAGE
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Mean {
            ratios,
            ratios_file,
            p,
        } => commands::mean(ratios.as_deref(), ratios_file.as_deref(), &p),
        Command::Train {
            config,
            seed,
            out_dir,
        } => commands::train(&config, seed, &out_dir),
        Command::Sweep {
            config,
            p,
            seed,
            out_dir,
        } => commands::sweep(&config, &p, seed, &out_dir),
        Command::Verify {
            seed,
            instances,
            only,
            out_dir,
            json,
        } => commands::verify(seed, instances, only, out_dir.as_deref(), json),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::EXIT_USAGE)
        }
    }
}
