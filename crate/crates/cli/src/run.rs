//! Run directory layout, config loading and the training loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use mspred_core::config::RunConfig;
use mspred_core::datagen::{generate_sequence, AnnotatedSequence, DatasetSpec, DigitGlyphSet, MnistSplit};
use mspred_core::metrics::{evaluate, load_plugin, MetricReport};
use mspred_core::model::MsPred;
use mspred_core::training::data::make_batch;
use mspred_core::training::{
    load_checkpoint, read_loss_log, save_checkpoint, Batch, BatchProducer, LossLog, StepOptions, TrainState,
};
use mspred_core::{Error, Result, Scalar};

use crate::plot::{line_chart, Series};
use crate::ConfigArgs;

pub fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.set_str(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `config.resolved`, `loss.csv`, `report.csv`, `checkpoints/`, `plots/`, `samples/`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.plots(), self.samples()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    pub fn config_resolved(&self) -> PathBuf {
        self.root.join("config.resolved")
    }
    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("loss.csv")
    }
    pub fn val_csv(&self) -> PathBuf {
        self.root.join("val.csv")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.ckpt")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    /// The run directory owning `checkpoint`, if it sits in `checkpoints/`.
    pub fn of_checkpoint(checkpoint: &Path) -> Option<RunDir> {
        let parent = checkpoint.parent()?;
        (parent.file_name()? == "checkpoints").then(|| RunDir::new(parent.parent().unwrap_or(Path::new("."))))
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn generate_set(spec: &DatasetSpec, glyphs: &DigitGlyphSet) -> Result<Vec<AnnotatedSequence>> {
    (0..spec.n_sequences as u64).map(|i| generate_sequence(spec, glyphs, i)).collect()
}

pub struct TrainOutcome {
    pub final_step: u64,
    pub checkpoint: PathBuf,
}

enum Source<S: Scalar> {
    Fixed(Batch<S>),
    Stream(BatchProducer<S>),
}

/// Trains from scratch, or from `last.ckpt` when `resume` is set.
pub fn train_model<S: Scalar>(cfg: &RunConfig, dir: &RunDir, resume: bool, quiet: bool) -> Result<TrainOutcome> {
    dir.create()?;
    let digest = cfg.digest();
    let (mut model, mut state) = if resume {
        let (m, s, header) = load_checkpoint::<S>(dir.last_checkpoint())?;
        if header.config_digest != digest {
            return Err(Error::Config(format!(
                "checkpoint was written under config digest {}, current config has {digest}",
                header.config_digest
            )));
        }
        (m, s)
    } else {
        let m = MsPred::<S>::new(cfg.model.clone(), cfg.seed)?;
        let s = TrainState::new(cfg.seed, cfg.optim, m.params())?;
        (m, s)
    };
    write_file(&dir.config_resolved(), cfg.resolved())?;
    let mut log = LossLog::open(dir.loss_csv(), state.step)?;
    let glyphs = Arc::new(cfg.glyphs(MnistSplit::Train)?);
    let spec = cfg.train_spec();
    let mut source = if cfg.data.fixed_sequences > 0 {
        Source::Fixed(make_batch(&spec, &glyphs, 0, cfg.data.fixed_sequences)?)
    } else {
        Source::Stream(BatchProducer::spawn(spec, glyphs.clone(), cfg.batch_size, state.step, cfg.prefetch))
    };
    let val_set = generate_set(&cfg.val_spec(), &glyphs)?;
    let opts = StepOptions { weights: cfg.loss, norm: cfg.loss_norm };
    let started = Instant::now();
    while state.step < cfg.steps {
        let batch = match &mut source {
            Source::Fixed(b) => b.clone(),
            Source::Stream(p) => p.next_batch()?,
        };
        let mut rec = mspred_core::training::train_step(&mut model, &batch, &mut state, opts)?;
        if cfg.log_wall_time {
            rec.wall_time = started.elapsed().as_secs_f64();
        }
        log.append(&rec)?;
        let step = state.step;
        if !quiet && (step % 50 == 0 || step == cfg.steps) {
            println!("step {step}: total {:.4} frame {:.4} mid {:.4} high {:.4}", rec.total, rec.frame, rec.mid, rec.high);
        }
        if cfg.validate_every > 0 && step % cfg.validate_every == 0 && !val_set.is_empty() {
            let report = evaluate(&model, &val_set, &model.schedule(), None, cfg.eval_batch_size)?;
            let mse = report.overall("mse").expect("mse is always reported");
            if state.best_metric.is_none_or(|b| mse < b) {
                state.best_metric = Some(mse);
            }
            append_line(&dir.val_csv(), "step,val_mse", &format!("{step},{mse}"))?;
        }
        if step % cfg.checkpoint_every.max(1) == 0 || step == cfg.steps {
            save_checkpoint(dir.checkpoints().join(format!("step_{step:06}.ckpt")), &model, &state, &digest)?;
            save_checkpoint(dir.last_checkpoint(), &model, &state, &digest)?;
        }
    }
    if state.step == 0 {
        save_checkpoint(dir.last_checkpoint(), &model, &state, &digest)?;
    }
    plot_losses(dir)?;
    Ok(TrainOutcome { final_step: state.step, checkpoint: dir.last_checkpoint() })
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn plot_losses(dir: &RunDir) -> Result<()> {
    let records = read_loss_log(dir.loss_csv())?;
    let series = |name: &str, f: fn(&mspred_core::training::LossRecord) -> f64| Series {
        name: name.to_string(),
        points: records.iter().map(|r| (r.step as f64, f(r))).collect(),
    };
    let svg = line_chart(
        "training loss",
        "step",
        "loss (log scale)",
        &[series("total", |r| r.total), series("frame", |r| r.frame), series("mid", |r| r.mid), series("high", |r| r.high)],
        true,
    );
    write_file(&dir.plots().join("loss.svg"), svg)
}

/// Evaluates a trained model, loading it at the checkpoint's precision.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    sequences: &[AnnotatedSequence],
    plugin_spec: &str,
    batch_size: usize,
) -> Result<(MetricReport, String)> {
    let header = mspred_core::training::read_checkpoint_header(checkpoint)?;
    let plugin = load_plugin(plugin_spec)?;
    let report = match header.scalar_bytes {
        4 => {
            let (m, _, _) = load_checkpoint::<f32>(checkpoint)?;
            evaluate(&m, sequences, &m.schedule(), Some(plugin.as_ref()), batch_size)?
        }
        _ => {
            let (m, _, _) = load_checkpoint::<f64>(checkpoint)?;
            evaluate(&m, sequences, &m.schedule(), Some(plugin.as_ref()), batch_size)?
        }
    };
    Ok((report, header.config_digest))
}
