use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use mspred_core::config::RunConfig;
use mspred_core::Error;

mod ablate;
mod eval;
mod generate;
mod plot;
mod predict;
mod render;
mod run;
mod train;

/// Multi-scale hierarchical video prediction on bouncing-digit sequences.
///
/// Exit codes: 0 success, 2 configuration or argument error, 3 data or
/// I/O error, 4 numeric failure during training, 1 internal error.
#[derive(Parser)]
#[command(name = "mspred", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fixed test set and write it as a dataset container.
    Generate(generate::GenerateArgs),
    /// Train a model; artifacts go to the run directory.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint or a baseline on a dataset container.
    Eval(eval::EvalArgs),
    /// Render predictions for one test sequence as PNG grid and GIF.
    Predict(predict::PredictArgs),
    /// Train and evaluate ablation variants under one budget.
    Ablate(ablate::AblateArgs),
}

/// Config file plus `key=value` overrides, shared by several commands.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration (dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set optim.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Checksum { .. } | Error::Version { .. } => 3,
        Error::NonFinite(_) => 4,
        Error::Shape(_) | Error::Schedule(_) | Error::State(_) | Error::Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    let keys = format!("Configuration keys and defaults:\n{}", RunConfig::default().resolved());
    let mut cmd = Cli::command();
    for name in ["generate", "train", "eval", "predict", "ablate"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys.clone()));
    }
    let cli = Cli::from_arg_matches_mut(&mut cmd.get_matches()).unwrap_or_else(|e| e.exit());
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Predict(a) => predict::run(a),
        Command::Ablate(a) => ablate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonFinite(d) = &e {
                for (group, norm) in &d.grad_norms {
                    eprintln!("  grad norm {group}: {norm}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
