use std::path::PathBuf;

use clap::Args;
use mspred_core::config::Precision;
use mspred_core::Result;

use crate::run::{load_config, train_model, RunDir};
use crate::ConfigArgs;

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Continue from `checkpoints/last.ckpt` in the run directory.
    #[arg(long)]
    resume: bool,
    /// Only print the final summary.
    #[arg(long)]
    quiet: bool,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let dir = RunDir::new(&args.out);
    let outcome = match cfg.precision {
        Precision::F32 => train_model::<f32>(&cfg, &dir, args.resume, args.quiet)?,
        Precision::F64 => train_model::<f64>(&cfg, &dir, args.resume, args.quiet)?,
    };
    println!("trained to step {}; checkpoint {}", outcome.final_step, outcome.checkpoint.display());
    Ok(())
}
