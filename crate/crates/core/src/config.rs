//! Run configuration as a flat document of dotted keys.
//!
//! Files are TOML; nested tables and dotted keys are equivalent, so
//! `model.hidden = 8` and `[model]\nhidden = 8` both set `model.hidden`.
//! Every key must be known. The resolved document lists every key with
//! its effective value, sorted. The digest covers only keys that change
//! the trained weights, so a run can be resumed with a larger step budget.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::Value;

use crate::datagen::container::hex;
use crate::datagen::{load_digit_glyphs, Canvas, DatasetSpec, DigitGlyphSet, MnistSplit, TargetSpec};
use crate::encoder::EncoderStyle;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::predictor::CellKind;
use crate::training::{AdamConfig, LossNorm, LossWeights};

/// Key prefixes left out of the digest: naming, step budget, bookkeeping
/// cadence and evaluation settings.
pub const DIGEST_EXCLUDED: [&str; 7] =
    ["run.", "optim.steps", "train.checkpoint_every", "train.validate_every", "train.prefetch", "log.", "eval."];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// `synthetic` or a directory holding the MNIST IDX files.
    pub glyphs: String,
    pub glyphs_per_digit: usize,
    pub seed: u64,
    pub sequence_length: usize,
    pub sigma: f64,
    /// Train on this many fixed sequences instead of a fresh stream; 0 = stream.
    pub fixed_sequences: usize,
    pub test_seed: u64,
    pub test_n: usize,
    pub val_n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub loss: LossWeights,
    pub loss_norm: LossNorm,
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint_every: u64,
    pub validate_every: u64,
    pub prefetch: usize,
    pub log_wall_time: bool,
    pub lpips_plugin: String,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "default".into(),
            model: ModelConfig::default(),
            data: DataConfig {
                glyphs: "synthetic".into(),
                glyphs_per_digit: 100,
                seed: 0,
                sequence_length: 57,
                sigma: 1.5,
                fixed_sequences: 0,
                test_seed: 1,
                test_n: 256,
                val_n: 16,
            },
            optim: AdamConfig::default(),
            batch_size: 16,
            steps: 30_000,
            loss: LossWeights::default(),
            loss_norm: LossNorm::Squared,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 1000,
            validate_every: 1000,
            prefetch: 2,
            log_wall_time: false,
            lpips_plugin: "identity".into(),
            eval_batch_size: 16,
        }
    }
}

fn key_err(key: &str, want: &str, got: &Value) -> Error {
    Error::Config(format!("key `{key}` expects {want}, got {got}"))
}

fn as_uint(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(key_err(key, "a non-negative integer", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_uint(key, v).map(|x| x as usize)
}

fn as_float(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(key_err(key, "a number", v)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| key_err(key, "true or false", v))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| key_err(key, "a string", v))
}

fn as_array<const N: usize>(key: &str, v: &Value) -> Result<[usize; N]> {
    let arr = v.as_array().filter(|a| a.len() == N).ok_or_else(|| key_err(key, &format!("an array of {N} integers"), v))?;
    let mut out = [0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = as_usize(key, x)?;
    }
    Ok(out)
}

fn int(v: impl TryInto<i64>) -> Value {
    Value::Integer(v.try_into().unwrap_or(i64::MAX))
}

fn int_array(v: &[usize]) -> Value {
    Value::Array(v.iter().map(|&x| int(x)).collect())
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl RunConfig {
    /// Every known key and its current value.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let m = &self.model;
        let d = &self.data;
        let style = match m.encoder.style {
            EncoderStyle::Dcgan => "dcgan",
            EncoderStyle::VggLike => "vgg-like",
        };
        let cell = match m.cell {
            CellKind::Convolutional => "convolutional",
            CellKind::Linear => "linear",
        };
        let norm = match self.loss_norm {
            LossNorm::Squared => "squared",
            LossNorm::L2 => "l2",
        };
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let entries: Vec<(&str, Value)> = vec![
            ("run.name", Value::String(self.run_name.clone())),
            ("model.channels", int_array(&m.encoder.stage_channels)),
            ("model.encoder_style", Value::String(style.into())),
            ("model.hidden", int(m.hidden_channels)),
            ("model.cells", int(m.n_cells)),
            ("model.kernel", int(m.kernel)),
            ("model.linear_hidden", int(m.linear_hidden)),
            ("model.periods", int_array(&m.periods)),
            ("model.seed_frames", int(m.seed_frames)),
            ("model.iterations", int(m.iterations)),
            ("model.cell", Value::String(cell.into())),
            ("model.spatial_hierarchy", Value::Boolean(m.spatial_hierarchy)),
            ("model.temporal_hierarchy", Value::Boolean(m.temporal_hierarchy)),
            ("model.height", int(m.frame_size.0)),
            ("model.width", int(m.frame_size.1)),
            ("model.n_digits", int(m.n_digits)),
            ("data.glyphs", Value::String(d.glyphs.clone())),
            ("data.glyphs_per_digit", int(d.glyphs_per_digit)),
            ("data.seed", int(d.seed)),
            ("data.sequence_length", int(d.sequence_length)),
            ("data.sigma", Value::Float(d.sigma)),
            ("data.fixed_sequences", int(d.fixed_sequences)),
            ("data.test_seed", int(d.test_seed)),
            ("data.test_n", int(d.test_n)),
            ("data.val_n", int(d.val_n)),
            ("optim.lr", Value::Float(self.optim.lr)),
            ("optim.beta1", Value::Float(self.optim.beta1)),
            ("optim.beta2", Value::Float(self.optim.beta2)),
            ("optim.eps", Value::Float(self.optim.eps)),
            ("optim.batch_size", int(self.batch_size)),
            ("optim.steps", int(self.steps)),
            ("loss.lambda1", Value::Float(self.loss.lambda1)),
            ("loss.lambda2", Value::Float(self.loss.lambda2)),
            ("loss.norm", Value::String(norm.into())),
            ("train.seed", int(self.seed)),
            ("train.precision", Value::String(precision.into())),
            ("train.checkpoint_every", int(self.checkpoint_every)),
            ("train.validate_every", int(self.validate_every)),
            ("train.prefetch", int(self.prefetch)),
            ("log.wall_time", Value::Boolean(self.log_wall_time)),
            ("eval.lpips_plugin", Value::String(self.lpips_plugin.clone())),
            ("eval.batch_size", int(self.eval_batch_size)),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn keys() -> Vec<String> {
        RunConfig::default().to_flat().into_keys().collect()
    }

    /// Sets one dotted key; unknown keys and ill-typed values are errors.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let enum_err = |allowed: &str| Error::Config(format!("key `{key}` must be one of {allowed}, got {v}"));
        match key {
            "run.name" => self.run_name = as_str(key, v)?.to_string(),
            "model.channels" => self.model.encoder.stage_channels = as_array(key, v)?,
            "model.encoder_style" => {
                self.model.encoder.style = match as_str(key, v)? {
                    "dcgan" => EncoderStyle::Dcgan,
                    "vgg-like" => EncoderStyle::VggLike,
                    _ => return Err(enum_err("dcgan, vgg-like")),
                }
            }
            "model.hidden" => self.model.hidden_channels = as_usize(key, v)?,
            "model.cells" => self.model.n_cells = as_usize(key, v)?,
            "model.kernel" => self.model.kernel = as_usize(key, v)?,
            "model.linear_hidden" => self.model.linear_hidden = as_usize(key, v)?,
            "model.periods" => self.model.periods = as_array(key, v)?,
            "model.seed_frames" => self.model.seed_frames = as_usize(key, v)?,
            "model.iterations" => self.model.iterations = as_usize(key, v)?,
            "model.cell" => {
                self.model.cell = match as_str(key, v)? {
                    "convolutional" => CellKind::Convolutional,
                    "linear" => CellKind::Linear,
                    _ => return Err(enum_err("convolutional, linear")),
                }
            }
            "model.spatial_hierarchy" => self.model.spatial_hierarchy = as_bool(key, v)?,
            "model.temporal_hierarchy" => self.model.temporal_hierarchy = as_bool(key, v)?,
            "model.height" => self.model.frame_size.0 = as_usize(key, v)?,
            "model.width" => self.model.frame_size.1 = as_usize(key, v)?,
            "model.n_digits" => self.model.n_digits = as_usize(key, v)?,
            "data.glyphs" => self.data.glyphs = as_str(key, v)?.to_string(),
            "data.glyphs_per_digit" => self.data.glyphs_per_digit = as_usize(key, v)?,
            "data.seed" => self.data.seed = as_uint(key, v)?,
            "data.sequence_length" => self.data.sequence_length = as_usize(key, v)?,
            "data.sigma" => self.data.sigma = as_float(key, v)?,
            "data.fixed_sequences" => self.data.fixed_sequences = as_usize(key, v)?,
            "data.test_seed" => self.data.test_seed = as_uint(key, v)?,
            "data.test_n" => self.data.test_n = as_usize(key, v)?,
            "data.val_n" => self.data.val_n = as_usize(key, v)?,
            "optim.lr" => self.optim.lr = as_float(key, v)?,
            "optim.beta1" => self.optim.beta1 = as_float(key, v)?,
            "optim.beta2" => self.optim.beta2 = as_float(key, v)?,
            "optim.eps" => self.optim.eps = as_float(key, v)?,
            "optim.batch_size" => self.batch_size = as_usize(key, v)?,
            "optim.steps" => self.steps = as_uint(key, v)?,
            "loss.lambda1" => self.loss.lambda1 = as_float(key, v)?,
            "loss.lambda2" => self.loss.lambda2 = as_float(key, v)?,
            "loss.norm" => {
                self.loss_norm = match as_str(key, v)? {
                    "squared" => LossNorm::Squared,
                    "l2" => LossNorm::L2,
                    _ => return Err(enum_err("squared, l2")),
                }
            }
            "train.seed" => self.seed = as_uint(key, v)?,
            "train.precision" => {
                self.precision = match as_str(key, v)? {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(enum_err("f32, f64")),
                }
            }
            "train.checkpoint_every" => self.checkpoint_every = as_uint(key, v)?,
            "train.validate_every" => self.validate_every = as_uint(key, v)?,
            "train.prefetch" => self.prefetch = as_usize(key, v)?,
            "log.wall_time" => self.log_wall_time = as_bool(key, v)?,
            "eval.lpips_plugin" => self.lpips_plugin = as_str(key, v)?.to_string(),
            "eval.batch_size" => self.eval_batch_size = as_usize(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value`, parsing the value as a TOML literal and
    /// falling back to a bare string.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(key, &value)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        let mut cfg = RunConfig::default();
        for (k, v) in &flat {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Cross-key checks; call after all overrides are applied.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let sched = self.model.schedule();
        sched.check_sequence_length(self.data.sequence_length)?;
        LossWeights::new(self.loss.lambda1, self.loss.lambda2)?;
        if !(self.optim.lr >= 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be >= 0, got {}", self.optim.lr)));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(Error::Config("optim.beta1 and optim.beta2 must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.data.sigma > 0.0) {
            return Err(Error::Config("data.sigma must be positive".into()));
        }
        if self.data.glyphs_per_digit == 0 {
            return Err(Error::Config("data.glyphs_per_digit must be positive".into()));
        }
        self.train_spec().validate(&sched).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sorted `key = value` lines.
    pub fn resolved(&self) -> String {
        self.to_flat().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// sha256 of the resolved document without the [`DIGEST_EXCLUDED`] keys.
    pub fn digest(&self) -> String {
        let body: String = self
            .to_flat()
            .iter()
            .filter(|(k, _)| !DIGEST_EXCLUDED.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        hex(&Sha256::digest(body.as_bytes()))
    }

    pub fn canvas(&self) -> Canvas {
        Canvas { height: self.model.frame_size.0, width: self.model.frame_size.1 }
    }

    fn spec(&self, seed: u64, n: usize) -> DatasetSpec {
        let canvas = self.canvas();
        DatasetSpec {
            seed,
            n_sequences: n,
            sequence_length: self.data.sequence_length,
            n_digits: self.model.n_digits,
            canvas,
            targets: TargetSpec::for_canvas(canvas, self.data.sigma),
        }
    }

    pub fn train_spec(&self) -> DatasetSpec {
        self.spec(self.data.seed, self.data.fixed_sequences)
    }

    pub fn test_spec(&self) -> DatasetSpec {
        self.spec(self.data.test_seed, self.data.test_n)
    }

    /// Validation sequences come from their own seed, next to the train seed.
    pub fn val_spec(&self) -> DatasetSpec {
        self.spec(self.data.seed.wrapping_add(1_000_003), self.data.val_n)
    }

    /// Glyphs for training (`Train`) or evaluation (`Test`).
    pub fn glyphs(&self, split: MnistSplit) -> Result<DigitGlyphSet> {
        load_glyphs(&self.data.glyphs, self.data.glyphs_per_digit, split)
    }
}

/// `synthetic` draws digits procedurally, with distinct glyphs for the two
/// splits; anything else is a directory with MNIST IDX files.
pub fn load_glyphs(source: &str, per_digit: usize, split: MnistSplit) -> Result<DigitGlyphSet> {
    match source {
        "synthetic" => Ok(DigitGlyphSet::synthetic(per_digit, if split == MnistSplit::Train { 0 } else { 1 })),
        dir => load_digit_glyphs(PathBuf::from(dir), split),
    }
}
