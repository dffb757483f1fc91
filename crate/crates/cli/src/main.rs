//! `memattn`: bank building, inference, inspection, benchmarking, and the
//! k ablation for the retrieval-augmented attention engine.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration/validation
//! failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "memattn",
    version,
    about = "Retrieval-augmented attention engine: encoder with disk-backed (key, value) memory banks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize frozen encoder weights from a seed and save them.
    GenWeights(commands::GenWeightsArgs),
    /// Generate a synthetic test volume (.vol).
    GenVolume(commands::GenVolumeArgs),
    /// Build per-class memory banks from class dataset manifests.
    BuildBank(commands::BuildBankArgs),
    /// Encode one volume, optionally retrieving from memory banks.
    Infer(commands::InferArgs),
    /// Emit efficiency reports: latency, FLOPs, parameters, cache bytes.
    Bench(commands::BenchArgs),
    /// Run the k ablation and emit its CSV.
    Ablate(commands::AblateArgs),
    /// Print a bank's header, entry count, and per-class counts.
    InspectBank(commands::InspectBankArgs),
    /// Concatenate banks with identical geometry into one file.
    MergeBanks(commands::MergeBanksArgs),
}

/// A command failure carrying the process exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<memattn_core::Error> for Failure {
    fn from(e: memattn_core::Error) -> Self {
        Failure {
            code: if e.is_validation() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenWeights(args) => commands::gen_weights(args),
        Command::GenVolume(args) => commands::gen_volume(args),
        Command::BuildBank(args) => commands::build_bank(args),
        Command::Infer(args) => commands::infer(args),
        Command::Bench(args) => commands::bench(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::InspectBank(args) => commands::inspect_bank(args),
        Command::MergeBanks(args) => commands::merge_banks(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
