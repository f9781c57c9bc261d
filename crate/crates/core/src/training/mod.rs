//! Multi-scale loss, Adam, the training step and the loss log.

pub mod checkpoint;
pub mod data;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, NonFiniteDiagnostic, Result};
use crate::model::{Emissions, MsPred};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::schedule::TickSchedule;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use data::{Batch, BatchProducer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1.is_finite() && lambda2.is_finite() && lambda1 >= 0.0 && lambda2 >= 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {lambda1}, {lambda2}")));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }
}

/// How one emission's error is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNorm {
    /// Sum of squared errors.
    #[default]
    Squared,
    /// Euclidean norm of the error.
    L2,
}

/// Differentiable total plus the three unweighted components.
#[derive(Clone, Copy, Debug)]
pub struct Loss<'t, S: Scalar> {
    pub total: Var<'t, S>,
    pub frame: f64,
    pub mid: f64,
    pub high: f64,
}

fn check_steps<T>(head: &str, got: &[(usize, T)], want: &[usize]) -> Result<()> {
    let got: Vec<usize> = got.iter().map(|(t, _)| *t).collect();
    if got == want {
        return Ok(());
    }
    let bad: Vec<usize> = (0..got.len().max(want.len())).filter(|&i| got.get(i) != want.get(i)).collect();
    Err(Error::Contract(format!(
        "{head} emissions at {got:?} do not match schedule {want:?}; offending indices {bad:?}"
    )))
}

/// Mean over emissions of the per-emission error, averaged over the batch.
fn head_loss<'t, S: Scalar>(preds: &[(usize, Var<'t, S>)], target: &Tensor<S>, norm: LossNorm) -> Result<Option<Var<'t, S>>> {
    let mut acc: Option<Var<'t, S>> = None;
    for (t, p) in preds {
        if *t == 0 || *t > target.dim(1) {
            return Err(Error::Contract(format!("no target for timestep {t}")));
        }
        let tgt = target.index1(t - 1);
        if p.shape() != tgt.shape() {
            return Err(Error::Shape(format!("prediction {:?} vs target {:?} at t={t}", p.shape(), tgt.shape())));
        }
        let mut e = p.sq_err_per_sample(&tgt);
        if norm == LossNorm::L2 {
            e = e.sqrt();
        }
        acc = Some(match acc {
            None => e,
            Some(a) => a.add(e),
        });
    }
    Ok(acc.map(|a| a.scale(1.0 / preds.len() as f64).mean()))
}

/// Combined loss `frame + lambda1 * mid + lambda2 * high`.
///
/// Each component averages the per-emission error over that head's
/// emissions, then over the batch.
pub fn compute_loss<'t, S: Scalar>(
    em: &Emissions<'t, S>,
    batch: &Batch<S>,
    schedule: &TickSchedule,
    weights: LossWeights,
    norm: LossNorm,
) -> Result<Loss<'t, S>> {
    check_steps("frame", &em.frames, &schedule.emissions(0))?;
    check_steps("mid", &em.mid, &schedule.emissions(1))?;
    check_steps("high", &em.high, &schedule.emissions(2))?;
    let frame = head_loss(&em.frames, &batch.frames, norm)?.ok_or_else(|| Error::Contract("no frame emissions".into()))?;
    let mid = head_loss(&em.mid, &batch.mid, norm)?;
    let high = head_loss(&em.high, &batch.high, norm)?;
    let scalar = |v: Option<Var<'t, S>>| v.map_or(0.0, |v| v.value().data()[0].as_f64());
    let mut total = frame;
    if let Some(m) = mid {
        total = total.add(m.scale(weights.lambda1));
    }
    if let Some(h) = high {
        total = total.add(h.scale(weights.lambda2));
    }
    Ok(Loss { total, frame: scalar(Some(frame)), mid: scalar(mid), high: scalar(high) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moments are kept per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S: Scalar> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Result<Self> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", config.lr)));
        }
        let zeros: Vec<Tensor<S>> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Ok(Adam { config, t: 0, m: zeros.clone(), v: zeros })
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>]) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = S::of(c.lr / bc1);
        let (root_bc2, eps) = (S::of(bc2.sqrt()), S::of(c.eps));
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                p[j] -= step * m[j] / (v[j].sqrt() / root_bc2 + eps);
            }
        }
    }
}

/// Everything besides the parameters needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S: Scalar> {
    pub step: u64,
    pub seed: u64,
    pub best_metric: Option<f64>,
    pub optimizer: Adam<S>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(seed: u64, optim: AdamConfig, params: &ParamStore<S>) -> Result<Self> {
        Ok(TrainState { step: 0, seed, best_metric: None, optimizer: Adam::new(optim, params)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub frame: f64,
    pub mid: f64,
    pub high: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub norm: LossNorm,
}

/// Gradient of every parameter, zero for parameters the loss did not reach.
pub fn gradients<S: Scalar>(
    model: &MsPred<S>,
    batch: &Batch<S>,
    opts: StepOptions,
) -> Result<(Vec<Tensor<S>>, [f64; 4])> {
    let params = model.params();
    let tape = Tape::with_params(params);
    let (em, _) = model.rollout(&tape, &batch.frames)?;
    let loss = compute_loss(&em, batch, &model.schedule(), opts.weights, opts.norm)?;
    let total = loss.total.value().data()[0].as_f64();
    let g = tape.backward(loss.total);
    let grads =
        params.ids().map(|id| g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))).collect();
    Ok((grads, [total, loss.frame, loss.mid, loss.high]))
}

fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("predictor"), Some(level)) => format!("predictor.{level}"),
        (Some("decoder"), Some(head @ ("frame" | "mid" | "high"))) => format!("decoder.{head}"),
        (Some(top), _) => top.to_string(),
        _ => name.to_string(),
    }
}

/// One optimizer step on `batch`.
pub fn train_step<S: Scalar>(
    model: &mut MsPred<S>,
    batch: &Batch<S>,
    state: &mut TrainState<S>,
    opts: StepOptions,
) -> Result<LossRecord> {
    let (grads, [total, frame, mid, high]) = gradients(model, batch, opts)?;
    let grad_norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    let step = state.step + 1;
    if !(total.is_finite() && grad_norm.is_finite()) {
        let mut groups: Vec<(String, f64)> = Vec::new();
        for (id, g) in model.params().ids().zip(&grads) {
            let name = group_of(model.params().name(id));
            match groups.iter_mut().find(|(n, _)| *n == name) {
                Some((_, s)) => *s += g.sum_sq(),
                None => groups.push((name, g.sum_sq())),
            }
        }
        let grad_norms = groups.into_iter().map(|(n, s)| (n, s.sqrt())).collect();
        return Err(Error::NonFinite(Box::new(NonFiniteDiagnostic { step, total, frame, mid, high, grad_norms })));
    }
    state.optimizer.step(model.params_mut(), &grads);
    state.step = step;
    Ok(LossRecord { step, total, frame, mid, high, grad_norm, wall_time: 0.0 })
}

pub const LOSS_HEADER: &str = "step,total,frame,mid,high,grad_norm,wall_time";

/// Append-only CSV of loss records.
pub struct LossLog {
    path: PathBuf,
    file: File,
}

impl LossLog {
    /// Opens `path` for appending, writing the header if the file is new.
    /// Rows past `keep_until` (left by an interrupted run) are dropped.
    pub fn open(path: impl AsRef<Path>, keep_until: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut keep = Vec::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s <= keep_until) {
                    keep.push(line);
                }
            }
        }
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{LOSS_HEADER}").map_err(|e| Error::io(&path, e))?;
        for line in keep {
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(LossLog { path, file })
    }

    pub fn append(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{},{},{}",
            r.step, r.total, r.frame, r.mid, r.high, r.grad_norm, r.wall_time
        )
        .and_then(|_| self.file.flush())
        .map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a loss CSV back into records.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let v: Vec<f64> = line
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: not numeric", i + 1)))?;
        if v.len() != 7 {
            return Err(Error::format(path, format!("line {}: expected 7 fields", i + 1)));
        }
        out.push(LossRecord {
            step: v[0] as u64,
            total: v[1],
            frame: v[2],
            mid: v[3],
            high: v[4],
            grad_norm: v[5],
            wall_time: v[6],
        });
    }
    Ok(out)
}

/// Mean of `values[from..to]` (1-based, inclusive).
pub fn window_mean(values: &[f64], from: usize, to: usize) -> f64 {
    let w = &values[from - 1..to];
    w.iter().sum::<f64>() / w.len() as f64
}
