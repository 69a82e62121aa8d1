use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cobra_core::model::Variant;
use cobra_core::Error;

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "cobra", version, about = "Bottleneck-token audio-visual fusion on a synthetic task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval splits.
    Gen(CommonArgs),
    /// Train one model variant and save its best checkpoint.
    Train(CommonArgs),
    /// WER over clean and noisy conditions.
    Eval(CommonArgs),
    /// Cross-modal influence from attention rollout across the SNR grid.
    Analyze(CommonArgs),
    /// Attention cost for concat, cross and bottleneck fusion.
    Bench(CommonArgs),
}

#[derive(clap::Args, Debug, Clone)]
pub struct CommonArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `bottleneck` or `audio_only`.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Mismatch(_) => 3,
        Error::Config(_) | Error::Usage(_) | Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
