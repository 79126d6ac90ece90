use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dlf_cli::commands;

/// Dynamic loss-function teaching experiments.
#[derive(Parser)]
#[command(name = "dlf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a teacher by reverse-mode differentiation through student
    /// training; writes a checkpoint, per-step metrics, and optional
    /// coefficient dumps.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a student under a fixed loss or a frozen teacher checkpoint and
    /// report its test error rate.
    TrainStudent {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare the reverse-mode hypergradient against the brute-force
    /// finite-difference oracle.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a teacher checkpoint on a file of state vectors and write one
    /// coefficient CSV per state.
    DumpCoefficients {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        states: PathBuf,
        /// Output path prefix; files are written as `<prefix><i>.csv`.
        #[arg(long)]
        out_prefix: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher { config } => commands::cmd_train_teacher(&config),
        Command::TrainStudent { config } => commands::cmd_train_student(&config),
        Command::Gradcheck { config } => commands::cmd_gradcheck(&config),
        Command::DumpCoefficients {
            checkpoint,
            states,
            out_prefix,
        } => commands::cmd_dump_coefficients(&checkpoint, &states, &out_prefix),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
