//! Full model assembly, rollout, ablation variants and the CopyLast baseline.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoder::{Decoder, DecoderConfig, FeatureReuseBuffer};
use crate::encoder::{check_spatial, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::predictor::{CellKind, LevelConfig, Predictor, TickSource};
use crate::scalar::Scalar;
use crate::schedule::{TickSchedule, LEVELS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hidden_channels: usize,
    pub n_cells: usize,
    pub kernel: usize,
    /// Hidden size of dense cells when `cell` is linear.
    pub linear_hidden: usize,
    pub periods: [usize; LEVELS],
    pub seed_frames: usize,
    pub iterations: usize,
    pub cell: CellKind,
    pub spatial_hierarchy: bool,
    pub temporal_hierarchy: bool,
    pub frame_size: (usize, usize),
    pub n_digits: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            hidden_channels: 128,
            n_cells: 4,
            kernel: 3,
            linear_hidden: 256,
            periods: [1, 4, 8],
            seed_frames: 17,
            iterations: 5,
            cell: CellKind::Convolutional,
            spatial_hierarchy: true,
            temporal_hierarchy: true,
            frame_size: (64, 64),
            n_digits: 2,
        }
    }
}

impl ModelConfig {
    /// Small widths for tests and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig { stage_channels: [4, 8, 8, 8], ..EncoderConfig::default() },
            hidden_channels: 8,
            n_cells: 1,
            linear_hidden: 16,
            frame_size: (32, 32),
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_spatial(self.frame_size.0, self.frame_size.1).map_err(|e| Error::Config(e.to_string()))?;
        let p = self.periods;
        if self.temporal_hierarchy {
            if !(p[0] == 1 && p[0] < p[1] && p[1] < p[2]) {
                return Err(Error::Config(format!("temporal hierarchy needs periods 1 < p1 < p2, got {p:?}")));
            }
        } else if p != [1; LEVELS] {
            return Err(Error::Config(format!(
                "temporal_hierarchy = false contradicts periods {p:?}; all periods must be 1"
            )));
        }
        if self.hidden_channels == 0 || self.n_cells == 0 || self.linear_hidden == 0 || self.n_digits == 0 {
            return Err(Error::Config("widths, cell counts and n_digits must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.encoder.stage_channels.contains(&0) || self.encoder.in_channels == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        TickSchedule::new(self.periods, self.seed_frames, self.iterations)?;
        Ok(())
    }

    pub fn schedule(&self) -> TickSchedule {
        TickSchedule { periods: self.periods, seed_frames: self.seed_frames, iterations: self.iterations }
    }

    /// Spatial size of each level's recurrent maps.
    pub fn level_sizes(&self) -> [(usize, usize); LEVELS] {
        let (h, w) = self.frame_size;
        if self.spatial_hierarchy {
            [(h / 4, w / 4), (h / 8, w / 8), (h / 16, w / 16)]
        } else {
            [(h / 16, w / 16); LEVELS]
        }
    }

    /// Mid-level heatmap size.
    pub fn mid_size(&self) -> (usize, usize) {
        (self.frame_size.0 / 4, self.frame_size.1 / 4)
    }

    fn level_configs(&self) -> [LevelConfig; LEVELS] {
        let taps = self.encoder.tap_channels();
        let sizes = self.level_sizes();
        std::array::from_fn(|l| LevelConfig {
            period: self.periods[l],
            n_cells: self.n_cells,
            hidden_channels: self.hidden_channels,
            kernel: self.kernel,
            cell: self.cell,
            tap_channels: if self.spatial_hierarchy { taps[l] } else { taps[2] },
            map_size: sizes[l],
            linear_hidden: self.linear_hidden,
        })
    }
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow(u8);

impl AblationRow {
    pub const ALL: [AblationRow; 6] =
        [AblationRow(1), AblationRow(2), AblationRow(3), AblationRow(4), AblationRow(5), AblationRow(6)];

    pub fn new(id: u8) -> Result<Self> {
        if (1..=6).contains(&id) {
            Ok(AblationRow(id))
        } else {
            Err(Error::Argument(format!("unknown ablation row {id}; rows are 1..6")))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// `(cell, spatial hierarchy, temporal hierarchy)`.
    pub fn flags(self) -> (CellKind, bool, bool) {
        use CellKind::*;
        match self.0 {
            1 => (Convolutional, true, true),
            2 => (Linear, true, true),
            3 => (Convolutional, false, true),
            4 => (Convolutional, true, false),
            5 => (Convolutional, false, false),
            _ => (Linear, false, false),
        }
    }

    /// `base` with this row's cell and hierarchy flags applied.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (cell, spatial, temporal) = self.flags();
        let mut cfg = base.clone();
        cfg.cell = cell;
        cfg.spatial_hierarchy = spatial;
        cfg.temporal_hierarchy = temporal;
        if !temporal {
            cfg.periods = [1; LEVELS];
        } else if cfg.periods == [1; LEVELS] {
            cfg.periods = ModelConfig::default().periods;
        }
        cfg
    }
}

/// Builds the model for `config` with parameters drawn from `seed`.
pub fn make_variant<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<MsPred<S>> {
    MsPred::new(config.clone(), seed)
}

/// Frames, heatmaps and coordinates keyed by timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScalePrediction<S> {
    /// `[B, 3, H, W]` per emitted timestep.
    pub frames: Vec<(usize, Tensor<S>)>,
    /// `[B, 1, H/4, W/4]`.
    pub mid: Vec<(usize, Tensor<S>)>,
    /// `[B, 2 * n_digits]`.
    pub high: Vec<(usize, Tensor<S>)>,
}

impl<S> MultiScalePrediction<S> {
    pub fn frame_steps(&self) -> Vec<usize> {
        self.frames.iter().map(|(t, _)| *t).collect()
    }
    pub fn mid_steps(&self) -> Vec<usize> {
        self.mid.iter().map(|(t, _)| *t).collect()
    }
    pub fn high_steps(&self) -> Vec<usize> {
        self.high.iter().map(|(t, _)| *t).collect()
    }
}

/// Differentiable outputs of one rollout.
#[derive(Clone, Debug)]
pub struct Emissions<'t, S: Scalar> {
    pub frames: Vec<(usize, Var<'t, S>)>,
    pub mid: Vec<(usize, Var<'t, S>)>,
    pub high: Vec<(usize, Var<'t, S>)>,
}

impl<'t, S: Scalar> Emissions<'t, S> {
    pub fn values(&self) -> MultiScalePrediction<S> {
        let grab = |v: &[(usize, Var<'t, S>)]| v.iter().map(|(t, x)| (*t, (*x.value()).clone())).collect();
        MultiScalePrediction { frames: grab(&self.frames), mid: grab(&self.mid), high: grab(&self.high) }
    }
}

/// What happened at one timestep of a rollout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepRecord {
    pub t: usize,
    pub ticked: [bool; LEVELS],
    /// Timestep of each buffer entry after the tick.
    pub stamps: [Option<usize>; LEVELS],
    /// Frame, mid and high emission flags.
    pub emitted: [bool; LEVELS],
    pub state_digests: Option<[u64; LEVELS]>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RolloutTrace {
    pub steps: Vec<StepRecord>,
    pub encoder_calls: usize,
    /// Cell-stack invocations per level during the seed phase.
    pub seed_invocations: [usize; LEVELS],
    /// Cell-stack invocations per level during the prediction phase.
    pub prediction_invocations: [usize; LEVELS],
    /// Shape of the features each level consumed during the seed phase.
    pub level_input_shapes: [Vec<usize>; LEVELS],
}

impl RolloutTrace {
    pub fn tick_counts(&self) -> [usize; LEVELS] {
        std::array::from_fn(|l| self.steps.iter().filter(|s| s.ticked[l]).count())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RolloutOptions {
    /// Hash every level state after each step (slow).
    pub digests: bool,
}

pub struct MsPred<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
    encoder: Encoder,
    predictor: Predictor,
    decoder: Decoder,
    encoder_calls: AtomicUsize,
}

impl<S: Scalar> MsPred<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config.encoder, &mut rng);
        let predictor = Predictor::new(&mut params, config.level_configs(), config.schedule(), &mut rng);
        let dec_cfg = DecoderConfig {
            stage_channels: config.encoder.stage_channels,
            out_channels: config.encoder.in_channels,
            level_channels: [config.hidden_channels; LEVELS],
            frame_size: config.frame_size,
            n_digits: config.n_digits,
            spatial_hierarchy: config.spatial_hierarchy,
        };
        let decoder = Decoder::new(&mut params, &dec_cfg, &mut rng);
        Ok(MsPred { config, params, encoder, predictor, decoder, encoder_calls: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> TickSchedule {
        self.predictor.schedule
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Total encoder invocations over the model's lifetime.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn rollout<'t>(&self, tape: &'t Tape<S>, frames: &Tensor<S>) -> Result<(Emissions<'t, S>, RolloutTrace)> {
        self.rollout_with(tape, frames, RolloutOptions::default())
    }

    /// Runs the seed and prediction phases on `frames` `[B, T, C, H, W]`,
    /// of which only the first `seed_frames` are read.
    pub fn rollout_with<'t>(
        &self,
        tape: &'t Tape<S>,
        frames: &Tensor<S>,
        opts: RolloutOptions,
    ) -> Result<(Emissions<'t, S>, RolloutTrace)> {
        let cfg = &self.config;
        let sched = self.schedule();
        let s = frames.shape();
        if s.len() != 5 || s[2] != cfg.encoder.in_channels || (s[3], s[4]) != cfg.frame_size {
            return Err(Error::Shape(format!(
                "expected frames [B, T, {}, {}, {}], got {s:?}",
                cfg.encoder.in_channels, cfg.frame_size.0, cfg.frame_size.1
            )));
        }
        if s[1] < cfg.seed_frames {
            return Err(Error::Config(format!("{} frames given, model needs {} seed frames", s[1], cfg.seed_frames)));
        }
        let mut state = self.predictor.new_state();
        let mut buffer = FeatureReuseBuffer::new();
        let mut skip = None;
        let mut out = Emissions { frames: Vec::new(), mid: Vec::new(), high: Vec::new() };
        let mut trace = RolloutTrace::default();
        let last_frame = cfg.seed_frames + cfg.iterations;
        for t in 1..=sched.total_steps() {
            let seed = sched.is_seed(t);
            let source = if seed {
                let x = tape.constant(frames.index1(t - 1));
                self.encoder_calls.fetch_add(1, Ordering::Relaxed);
                trace.encoder_calls += 1;
                let taps = self.encoder.encode(x)?.taps();
                skip = Some(taps);
                TickSource::Seed(if cfg.spatial_hierarchy { taps } else { [taps[2]; LEVELS] })
            } else {
                TickSource::Feedback
            };
            if let TickSource::Seed(inputs) = source {
                for l in 0..LEVELS {
                    trace.level_input_shapes[l] = inputs[l].shape();
                }
            }
            let ran = self.predictor.tick(t, source, &mut state)?;
            for l in 0..LEVELS {
                if ran[l] {
                    let o = state.levels[l].output.expect("level ran");
                    buffer.store(l, t, o);
                    if seed {
                        trace.seed_invocations[l] += 1;
                    } else {
                        trace.prediction_invocations[l] += 1;
                    }
                }
            }
            let mut emitted = [false; LEVELS];
            if !seed {
                if t <= last_frame {
                    let sk = skip.as_ref().expect("seed phase precedes prediction");
                    out.frames.push((t, self.decoder.decode_frame(&buffer, sk)?));
                    emitted[0] = true;
                }
                if ran[1] {
                    out.mid.push((t, self.decoder.decode_mid(&buffer)?));
                    emitted[1] = true;
                }
                if ran[2] {
                    out.high.push((t, self.decoder.decode_high(&buffer)?));
                    emitted[2] = true;
                }
            }
            trace.steps.push(StepRecord {
                t,
                ticked: ran,
                stamps: buffer.stamps(),
                emitted,
                state_digests: opts.digests.then(|| std::array::from_fn(|l| state.levels[l].digest())),
            });
        }
        Ok((out, trace))
    }

    /// Predicts from exactly `seed_frames` frames `[B, C, 3, H, W]`.
    pub fn run_inference(&self, seed_frames: &Tensor<S>) -> Result<(MultiScalePrediction<S>, RolloutTrace)> {
        if seed_frames.rank() != 5 || seed_frames.dim(1) != self.config.seed_frames {
            return Err(Error::Config(format!(
                "model expects {} seed frames, got shape {:?}",
                self.config.seed_frames,
                seed_frames.shape()
            )));
        }
        let tape = Tape::with_params(&self.params);
        let (em, trace) = self.rollout(&tape, seed_frames)?;
        Ok((em.values(), trace))
    }
}

/// Anything that turns seed frames into future frames.
pub trait FramePredictor {
    fn name(&self) -> String;
    /// `seed` is `[B, C, 3, H, W]`; returns frames for `C+1..=C+N`.
    fn predict_frames(&self, seed: &Tensor<f32>) -> Result<Vec<(usize, Tensor<f32>)>>;
}

impl<S: Scalar> FramePredictor for MsPred<S> {
    fn name(&self) -> String {
        "mspred".into()
    }

    fn predict_frames(&self, seed: &Tensor<f32>) -> Result<Vec<(usize, Tensor<f32>)>> {
        let (pred, _) = self.run_inference(&seed.cast())?;
        Ok(pred.frames.into_iter().map(|(t, f)| (t, f.cast())).collect())
    }
}

/// Repeats the last seed frame for every predicted timestep.
#[derive(Clone, Copy, Debug)]
pub struct CopyLast {
    pub schedule: TickSchedule,
}

pub fn copy_last_baseline<S: Scalar>(seed_frames: &Tensor<S>, schedule: &TickSchedule) -> Result<MultiScalePrediction<S>> {
    let c = schedule.seed_frames;
    if seed_frames.rank() != 5 || seed_frames.dim(1) < c || c == 0 {
        return Err(Error::Shape(format!("need [B, >= {c}, C, H, W] seed frames, got {:?}", seed_frames.shape())));
    }
    let last = seed_frames.index1(c - 1);
    Ok(MultiScalePrediction {
        frames: (1..=schedule.iterations).map(|k| (c + k, last.clone())).collect(),
        mid: Vec::new(),
        high: Vec::new(),
    })
}

impl FramePredictor for CopyLast {
    fn name(&self) -> String {
        "copylast".into()
    }

    fn predict_frames(&self, seed: &Tensor<f32>) -> Result<Vec<(usize, Tensor<f32>)>> {
        Ok(copy_last_baseline(seed, &self.schedule)?.frames)
    }
}
