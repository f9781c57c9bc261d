use std::path::PathBuf;

use clap::Args;
use mspred_core::datagen::{write_container, MnistSplit};
use mspred_core::{Error, Result};

use crate::run::{generate_set, load_config};
use crate::ConfigArgs;

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Dataset seed [default: data.test_seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sequences [default: data.test_n].
    #[arg(long)]
    n: Option<usize>,
    /// Frames per sequence; must cover the full prediction schedule [default: data.sequence_length].
    #[arg(long)]
    length: Option<usize>,
    /// Output dataset container.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing file.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn run(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    cfg.data.test_seed = args.seed.unwrap_or(cfg.data.test_seed);
    cfg.data.test_n = args.n.unwrap_or(cfg.data.test_n);
    cfg.data.sequence_length = args.length.unwrap_or(cfg.data.sequence_length);
    let spec = cfg.test_spec();
    spec.validate(&cfg.model.schedule())?;
    if args.out.exists() && !args.force {
        return Err(Error::Argument(format!("{} already exists; pass --force to overwrite", args.out.display())));
    }
    let glyphs = cfg.glyphs(MnistSplit::Test)?;
    let sequences = generate_set(&spec, &glyphs)?;
    let digest = write_container(&args.out, &spec, &sequences)?;
    println!("wrote {} sequences of {} frames to {}", spec.n_sequences, spec.sequence_length, args.out.display());
    println!("sha256 {digest}");
    Ok(())
}
