//! `opsa`: command-line pipeline for conformal prediction under attack.
//!
//! Subcommands cover the full loop: generate blob datasets, split them
//! into train/calibration/test files, train models (standard,
//! PGD-adversarial, or conformal-adversarial), perturb datasets with an
//! attack, evaluate coverage/size/SSCV, and sweep the attack temperature. Every emitted report embeds the resolved-configuration
//! fingerprint and the root seed, and all output files are written
//! atomically (temp file + rename).
//!
//! Exit codes: 0 success, 2 configuration validation failure, 3 runtime
//! failure (I/O, numeric divergence, infeasible data).

mod attack_cmd;
mod eval_cmd;
mod gen_cmd;
mod opts;
mod report;
mod split_cmd;
mod sweep_cmd;
mod train_cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Rejected before any work started.
    Config(String),
    /// Failed while executing a validated run.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Wrap a prepare-phase error (bad parameter, malformed config file).
pub fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Wrap an execution-phase error (I/O, numerics, infeasible data).
pub fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "opsa",
    version,
    about = "Conformal prediction under adversarial attack: train, attack, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-blob dataset as CSV plus a sidecar.
    GenData(gen_cmd::GenArgs),
    /// Split one dataset CSV into train/calibration/test parts.
    Split(split_cmd::SplitArgs),
    /// Train a classifier (standard, pgd-at, or opsa-at) and write model + report.
    Train(train_cmd::TrainArgs),
    /// Perturb a dataset with fgsm, pgd, or the set-size attack.
    Attack(attack_cmd::AttackArgs),
    /// Calibrate on one file, evaluate prediction sets on another.
    Evaluate(eval_cmd::EvalArgs),
    /// Re-run attack + evaluation across a list of attack temperatures.
    SweepT1(sweep_cmd::SweepArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_cmd::run(args),
        Command::Split(args) => split_cmd::run(args),
        Command::Train(args) => train_cmd::run(args),
        Command::Attack(args) => attack_cmd::run(args),
        Command::Evaluate(args) => eval_cmd::run(args),
        Command::SweepT1(args) => sweep_cmd::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
