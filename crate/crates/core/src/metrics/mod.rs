//! Frame metrics and the evaluation protocol.
//!
//! Everything is computed on pixels in `[0, 1]`. `mse255` reports the
//! same error on the 0..255 scale.

pub mod lpips;
pub mod ssim;

use std::fmt::Write as _;
use std::path::Path;

use crate::datagen::AnnotatedSequence;
use crate::error::{Error, Result};
use crate::model::FramePredictor;
use crate::scalar::Scalar;
use crate::schedule::TickSchedule;
use crate::tensor::Tensor;

pub use lpips::{load_plugin, lpips, ConvPlugin, IdentityPlugin, LpipsPlugin};
pub use ssim::ssim;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn check_pair<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::Shape("metric inputs are empty".into()));
    }
    Ok(())
}

pub fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(sum / pred.numel() as f64)
}

pub fn mse255<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    Ok(mse(pred, target)? * 255.0 * 255.0)
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP)
}

pub fn psnr<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, max_value: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?, max_value))
}

pub const METRICS: [&str; 5] = ["mse", "mse255", "psnr", "ssim", "lpips"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    /// `(timestep, mean over sequences)`.
    pub per_horizon: Vec<(usize, f64)>,
    pub overall: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub predictor: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn overall(&self, metric: &str) -> Option<f64> {
        self.get(metric).map(|r| r.overall)
    }

    /// `metric,horizon,value,n`; the `mean` horizon is the overall value.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,horizon,value,n\n");
        for r in &self.rows {
            for (t, v) in &r.per_horizon {
                let _ = writeln!(s, "{},{},{},{}", r.metric, t, v, r.n);
            }
            let _ = writeln!(s, "{},mean,{},{}", r.metric, r.overall, r.n);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Markdown table, one row per metric.
    pub fn to_markdown(&self) -> String {
        let steps: Vec<usize> = self.rows.first().map(|r| r.per_horizon.iter().map(|(t, _)| *t).collect()).unwrap_or_default();
        let mut s = format!("| {} | mean |", self.predictor);
        for t in &steps {
            let _ = write!(s, " t={t} |");
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|".repeat(steps.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} | {:.4} |", r.metric, r.overall);
            for (_, v) in &r.per_horizon {
                let _ = write!(s, " {v:.4} |");
            }
            s.push('\n');
        }
        s
    }
}

/// Frame metrics of `predictor` on `sequences`, per predicted timestep.
///
/// Per-frame values are averaged over sequences for each timestep; the
/// overall value is the mean over timesteps. `lpips` is skipped when no
/// plugin is given.
pub fn evaluate(
    predictor: &dyn FramePredictor,
    sequences: &[AnnotatedSequence],
    schedule: &TickSchedule,
    plugin: Option<&dyn LpipsPlugin>,
    batch_size: usize,
) -> Result<MetricReport> {
    if sequences.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty test set".into()));
    }
    let c = schedule.seed_frames;
    let steps = schedule.emissions(0);
    let last = *steps.last().expect("at least one iteration");
    if let Some(short) = sequences.iter().find(|s| s.len() < last) {
        return Err(Error::Argument(format!("test sequence has {} frames, need {last}", short.len())));
    }
    let names: Vec<&str> = METRICS.iter().copied().filter(|m| *m != "lpips" || plugin.is_some()).collect();
    let mut sums = vec![vec![0.0f64; steps.len()]; names.len()];
    for chunk in sequences.chunks(batch_size.max(1)) {
        let seed_parts: Vec<Tensor<f32>> = chunk.iter().map(|s| seed_of(s, c)).collect::<Result<_>>()?;
        let seed = Tensor::stack(&seed_parts)?;
        let preds = predictor.predict_frames(&seed)?;
        let got: Vec<usize> = preds.iter().map(|(t, _)| *t).collect();
        if got != steps {
            return Err(Error::Contract(format!("predictor emitted frames at {got:?}, expected {steps:?}")));
        }
        for (h, (t, batch)) in preds.iter().enumerate() {
            for (b, seq) in chunk.iter().enumerate() {
                let p = batch.index0(b);
                let y = seq.frame(*t);
                let m = mse(&p, &y)?;
                for (k, name) in names.iter().enumerate() {
                    sums[k][h] += match *name {
                        "mse" => m,
                        "mse255" => m * 255.0 * 255.0,
                        "psnr" => psnr_from_mse(m, 1.0),
                        "ssim" => ssim(&p, &y)?,
                        _ => lpips(&p, &y, plugin.expect("filtered"))?,
                    };
                }
            }
        }
    }
    let n = sequences.len();
    let rows = names
        .iter()
        .zip(sums)
        .map(|(name, s)| {
            let per_horizon: Vec<(usize, f64)> = steps.iter().zip(&s).map(|(t, v)| (*t, v / n as f64)).collect();
            let overall = per_horizon.iter().map(|(_, v)| v).sum::<f64>() / per_horizon.len() as f64;
            MetricRow { metric: name.to_string(), per_horizon, overall, n }
        })
        .collect();
    Ok(MetricReport { predictor: predictor.name(), rows })
}

fn seed_of(seq: &AnnotatedSequence, c: usize) -> Result<Tensor<f32>> {
    let s = seq.frames.shape();
    let inner: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = c;
    Tensor::from_vec(&shape, seq.frames.data()[..c * inner].to_vec())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::datagen::{build_dataset, DatasetMode, DatasetSpec, DigitGlyphSet};
    use crate::model::CopyLast;

    #[test]
    fn mse_and_psnr_values() {
        let z = Tensor::<f64>::zeros(&[3, 4, 4]);
        let o = Tensor::<f64>::full(&[3, 4, 4], 1.0);
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(mse255(&z, &o).unwrap(), 65025.0);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        assert_eq!(psnr(&z, &z, 1.0).unwrap(), PSNR_CAP);
        assert!(mse(&z, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::uniform(&[2, 3, 5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[2, 3, 5, 7], 1.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..a.numel() {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        assert!((mse(&a, &b).unwrap() - acc / a.numel() as f64).abs() < 1e-9);
    }

    fn test_set(n: usize) -> Vec<AnnotatedSequence> {
        let spec = DatasetSpec::new(1, n, 57);
        let glyphs = Arc::new(DigitGlyphSet::synthetic(2, 0));
        build_dataset(spec, glyphs, &TickSchedule::reference(), DatasetMode::Test).unwrap().collect()
    }

    #[test]
    fn copy_last_on_static_sequences_is_perfect() {
        let mut seqs = test_set(2);
        for s in &mut seqs {
            let f17 = s.frame(17);
            let inner = f17.numel();
            for t in 17..22 {
                s.frames.data_mut()[t * inner..(t + 1) * inner].copy_from_slice(f17.data());
            }
        }
        let sched = TickSchedule::reference();
        let r = evaluate(&CopyLast { schedule: sched }, &seqs, &sched, Some(&IdentityPlugin), 4).unwrap();
        assert_eq!(r.overall("mse"), Some(0.0));
        assert_eq!(r.overall("psnr"), Some(PSNR_CAP));
        assert!((r.overall("ssim").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.overall("lpips"), Some(0.0));
    }

    #[test]
    fn report_is_deterministic_and_aggregates() {
        let seqs = test_set(3);
        let sched = TickSchedule::reference();
        let run = || evaluate(&CopyLast { schedule: sched }, &seqs, &sched, None, 2).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.get("lpips").is_none());
        for row in &a.rows {
            assert_eq!(row.per_horizon.len(), 5);
            let mean = row.per_horizon.iter().map(|(_, v)| v).sum::<f64>() / 5.0;
            assert_eq!(row.overall, mean);
        }
        assert!(a.to_csv().starts_with("metric,horizon,value,n\nmse,18,"));
        assert!(evaluate(&CopyLast { schedule: sched }, &[], &sched, None, 2).is_err());
    }
}
