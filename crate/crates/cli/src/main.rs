mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "vividforge", version, about = "One-step face video restoration toolkit")]
struct Cli {
    /// JSON file with default values for the subcommand's flags.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate procedural face clips with masks.
    Synth(commands::SynthArgs),
    /// Degrade a clip (or every clip under a root).
    Degrade(commands::DegradeArgs),
    /// Encode clips into latent tensors.
    Encode(commands::EncodeArgs),
    /// Align pixel masks to latent geometry.
    Maskalign(commands::MaskalignArgs),
    /// Train the velocity network (stage 1 or 2).
    Train(commands::TrainArgs),
    /// Restore a low-quality clip with a checkpoint.
    Restore(commands::RestoreArgs),
    /// Compute PSNR/SSIM between reference and test clips.
    Eval(commands::EvalArgs),
    /// Score clips with an assessment endpoint and write a retention manifest.
    Curate(commands::CurateArgs),
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("VIVIDFORGE_LOG", "info");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

/// 1 for problems with the inputs, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || e.downcast_ref::<vividforge::Error>().is_some_and(|e| e.is_validation())
    });
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging();
    let config = cli.config.as_deref();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, config),
        Command::Degrade(a) => commands::degrade(a, config),
        Command::Encode(a) => commands::encode(a, config),
        Command::Maskalign(a) => commands::maskalign(a, config),
        Command::Train(a) => commands::train(a, config),
        Command::Restore(a) => commands::restore(a, config),
        Command::Eval(a) => commands::eval(a, config),
        Command::Curate(a) => commands::curate(a, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
