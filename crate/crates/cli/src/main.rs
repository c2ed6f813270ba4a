use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowfilt_cli::{exit, presets_table, run_config_file, verify_all, Overrides};

/// Particle flow filter experiments.
#[derive(Parser)]
#[command(name = "flowfilt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Override the ensemble seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of λ steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the flow presets accepted in configs.
    Presets,
    /// Run the built-in acceptance checks.
    Verify,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, seed, steps, out } => match run_config_file(&config, &Overrides { seed, steps, out }) {
            Ok(outcome) => {
                println!("wrote {} files to {}", outcome.files.len(), outcome.output_dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{}", e.record());
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Presets => {
            print!("{}", presets_table());
            ExitCode::SUCCESS
        }
        Command::Verify => {
            let mut all_passed = true;
            for outcome in verify_all() {
                println!("{}", outcome.line());
                all_passed &= outcome.passed;
            }
            if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(exit::VERIFY_FAILED as u8)
            }
        }
    }
}
