use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mspred_core::datagen::{read_container, AnnotatedSequence, MnistSplit};
use mspred_core::metrics::{evaluate, load_plugin, MetricReport};
use mspred_core::model::CopyLast;
use mspred_core::training::read_checkpoint_header;
use mspred_core::{Error, Result};

use crate::plot::{line_chart, Series};
use crate::run::{evaluate_checkpoint, generate_set, load_config, write_file, RunDir};
use crate::ConfigArgs;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Baseline {
    Copylast,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a baseline instead of a checkpoint.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Dataset container; defaults to the test set described by the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory for `report.csv` and plots; defaults to the checkpoint's run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// LPIPS feature plugin: `identity` or a weight file.
    #[arg(long)]
    lpips: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn load_sequences(dataset: Option<&Path>, cfg: &mspred_core::config::RunConfig) -> Result<Vec<AnnotatedSequence>> {
    match dataset {
        Some(path) => Ok(read_container(path)?.1),
        None => generate_set(&cfg.test_spec(), &cfg.glyphs(MnistSplit::Test)?),
    }
}

pub fn run(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let sequences = load_sequences(args.dataset.as_deref(), &cfg)?;
    let plugin_spec = args.lpips.clone().unwrap_or_else(|| cfg.lpips_plugin.clone());
    let report = match (&args.checkpoint, args.baseline) {
        (Some(ckpt), _) => {
            let header = read_checkpoint_header(ckpt)?;
            let explicit = args.config.config.is_some() || !args.config.overrides.is_empty();
            if explicit && header.config_digest != cfg.digest() {
                eprintln!(
                    "warning: checkpoint config digest {} differs from the given config ({}); evaluating the checkpoint's model",
                    header.config_digest,
                    cfg.digest()
                );
            }
            evaluate_checkpoint(ckpt, &sequences, &plugin_spec, cfg.eval_batch_size)?.0
        }
        (None, Some(Baseline::Copylast)) => {
            let plugin = load_plugin(&plugin_spec)?;
            let schedule = cfg.model.schedule();
            evaluate(&CopyLast { schedule }, &sequences, &schedule, Some(plugin.as_ref()), cfg.eval_batch_size)?
        }
        (None, None) => return Err(Error::Argument("pass --checkpoint or --baseline".into())),
    };
    let dir = match (&args.out, &args.checkpoint) {
        (Some(out), _) => RunDir::new(out),
        (None, Some(ckpt)) => RunDir::of_checkpoint(ckpt).unwrap_or_else(|| RunDir::new("runs/eval")),
        (None, None) => RunDir::new("runs/eval-copylast"),
    };
    write_report(&dir, &report)?;
    print!("{}", report.to_markdown());
    println!("report written to {}", dir.report_csv().display());
    Ok(())
}

pub fn write_report(dir: &RunDir, report: &MetricReport) -> Result<()> {
    dir.create()?;
    report.write_csv(dir.report_csv())?;
    write_file(&dir.root.join("report.md"), report.to_markdown())?;
    for metric in ["mse", "psnr", "ssim", "lpips"] {
        let Some(row) = report.get(metric) else { continue };
        let series = Series {
            name: report.predictor.clone(),
            points: row.per_horizon.iter().map(|&(t, v)| (t as f64, v)).collect(),
        };
        let svg = line_chart(&format!("{metric} per predicted timestep"), "timestep", metric, &[series], false);
        write_file(&dir.plots().join(format!("{metric}.svg")), svg)?;
    }
    Ok(())
}
