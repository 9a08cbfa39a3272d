//! Command-line front end for meta-input adaptation.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. Diagnostics go to
//! stderr, results to stdout or the `--out` file.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use commands::{
    AdaptArgs, BnAdaptArgs, CorruptArgs, EvalArgs, PretrainArgs, ReportArgs, RunArgs, SynthArgs, UnsupArgs,
};

#[derive(Parser)]
#[command(name = "meta-input", version, about = "Adapt frozen image classifiers with a single learned input offset")]
struct Cli {
    /// Repeat for more log detail (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the digit CNN on a labeled manifest and save a frozen checkpoint
    Pretrain(PretrainArgs),
    /// Optimize a meta input on labeled target data
    Adapt(AdaptArgs),
    /// Optimize a meta input from confident pseudo labels
    AdaptUnsup(UnsupArgs),
    /// Recompute batchnorm statistics on target data
    BnAdapt(BnAdaptArgs),
    /// Accuracy of a checkpoint (optionally with a meta input) and PSNR against a clean set
    Eval(EvalArgs),
    /// Write a corrupted or shifted copy of a dataset
    Corrupt(CorruptArgs),
    /// Execute an experiment grid from a config file
    Run(RunArgs),
    /// Re-render a saved experiment report
    Report(ReportArgs),
    /// Generate a synthetic digit dataset
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum OutputFormat {
    #[default]
    TableText,
    Structured,
}

/// Flags shared by every single-step subcommand.
#[derive(Args, Debug, Default)]
struct Common {
    /// TOML file supplying any flag by name; flags given here win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output style for results printed to stdout
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::AdaptUnsup(a) => commands::adapt_unsup(a),
        Command::BnAdapt(a) => commands::bn_adapt(a),
        Command::Eval(a) => commands::eval(a),
        Command::Corrupt(a) => commands::corrupt(a),
        Command::Run(a) => commands::run(a),
        Command::Report(a) => commands::report(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
