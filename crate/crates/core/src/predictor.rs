//! Clockwork hierarchy of LSTM levels.
//!
//! Each level is a stack of LSTM cells (convolutional, or dense on
//! flattened maps). Level `l` only runs on the timesteps its period
//! allows; in between it keeps its state and last output untouched.
//! During the seed phase a level reads its encoder tap; afterwards it
//! reads its own previous output.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::schedule::{TickSchedule, LEVELS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    Convolutional,
    Linear,
}

/// Shape of one level of the hierarchy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelConfig {
    pub period: usize,
    pub n_cells: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    pub cell: CellKind,
    /// Channels of the encoder tap this level reads during the seed phase.
    pub tap_channels: usize,
    /// Spatial size `(h, w)` of the level's feature maps.
    pub map_size: (usize, usize),
    /// Hidden size of dense cells.
    pub linear_hidden: usize,
}

/// `h` and `c` of one LSTM cell.
#[derive(Clone, Copy, Debug)]
pub struct CellState<'t, S: Scalar> {
    pub h: Var<'t, S>,
    pub c: Var<'t, S>,
}

/// LSTM update with gates from one convolution over `[x, h]`.
///
/// Gate order along channels is input, forget, output, candidate.
/// No peephole connections.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub gates: Conv2d,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let geom = ConvGeom { k: kernel, stride: 1, pad: kernel / 2 };
        ConvLstmCell { gates: Conv2d::new(store, &format!("{name}.gates"), input + hidden, 4 * hidden, geom, rng), hidden }
    }

    pub fn zero_state<'t, S: Scalar>(&self, x: Var<'t, S>) -> CellState<'t, S> {
        let s = x.shape();
        let z = x.tape().constant(Tensor::zeros(&[s[0], self.hidden, s[2], s[3]]));
        CellState { h: z, c: z }
    }

    /// One step; a `None` state starts from zeros.
    pub fn step<'t, S: Scalar>(&self, x: Var<'t, S>, state: Option<CellState<'t, S>>) -> Result<CellState<'t, S>> {
        let state = state.unwrap_or_else(|| self.zero_state(x));
        let (xs, hs) = (x.shape(), state.h.shape());
        if xs.len() != 4 || xs[0] != hs[0] || xs[2..] != hs[2..] {
            return Err(Error::Shape(format!("cell input {xs:?} does not match state {hs:?}")));
        }
        let z = self.gates.forward(Var::concat(&[x, state.h]));
        Ok(lstm_gates(z, state.c, self.hidden))
    }
}

fn lstm_gates<'t, S: Scalar>(z: Var<'t, S>, c: Var<'t, S>, hidden: usize) -> CellState<'t, S> {
    let i = z.narrow(0, hidden).sigmoid();
    let f = z.narrow(hidden, hidden).sigmoid();
    let o = z.narrow(2 * hidden, hidden).sigmoid();
    let g = z.narrow(3 * hidden, hidden).tanh();
    let c = f.mul(c).add(i.mul(g));
    let h = o.mul(c.tanh());
    CellState { h, c }
}

/// Standard LSTM on vectors `[B, F]`.
#[derive(Clone, Debug)]
pub struct LinearLstmCell {
    pub gates: Linear,
    pub hidden: usize,
}

impl LinearLstmCell {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        LinearLstmCell { gates: Linear::new(store, &format!("{name}.gates"), input + hidden, 4 * hidden, rng), hidden }
    }

    pub fn step<'t, S: Scalar>(&self, x: Var<'t, S>, state: Option<CellState<'t, S>>) -> Result<CellState<'t, S>> {
        let xs = x.shape();
        if xs.len() != 2 {
            return Err(Error::Shape(format!("dense cell expects [B, F], got {xs:?}")));
        }
        let state = state.unwrap_or_else(|| {
            let z = x.tape().constant(Tensor::zeros(&[xs[0], self.hidden]));
            CellState { h: z, c: z }
        });
        if state.h.shape()[0] != xs[0] {
            return Err(Error::Shape("dense cell batch mismatch".into()));
        }
        let z = self.gates.forward(Var::concat(&[x, state.h]));
        Ok(lstm_gates(z, state.c, self.hidden))
    }
}

#[derive(Clone, Debug)]
enum Cells {
    Conv(Vec<ConvLstmCell>),
    /// Dense cells plus the projection back to a feature map.
    Dense { cells: Vec<LinearLstmCell>, output: Linear },
}

/// What a level consumes on a tick.
#[derive(Clone, Copy, Debug)]
pub enum LevelInput<'t, S: Scalar> {
    /// Encoder features of the current seed frame.
    Encoded(Var<'t, S>),
    /// The level's own most recent output.
    Feedback,
}

/// Recurrent state of one level across a rollout.
#[derive(Clone, Debug)]
pub struct LevelState<'t, S: Scalar> {
    pub cells: Vec<Option<CellState<'t, S>>>,
    pub output: Option<Var<'t, S>>,
    pub last_tick: Option<usize>,
    /// Number of times the cell stack ran.
    pub invocations: usize,
}

impl<'t, S: Scalar> LevelState<'t, S> {
    pub fn new(n_cells: usize) -> Self {
        LevelState { cells: vec![None; n_cells], output: None, last_tick: None, invocations: 0 }
    }

    /// Hash of every cell's `h` and `c`; `0` before the first tick.
    pub fn digest(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for cell in self.cells.iter().flatten() {
            for v in [cell.h, cell.c] {
                for x in v.value().data() {
                    hasher.write_u64(x.as_f64().to_bits());
                }
            }
        }
        hasher.finish()
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    pub index: usize,
    pub config: LevelConfig,
    input_adapter: Conv2d,
    feedback_adapter: Conv2d,
    cells: Cells,
}

impl Level {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        index: usize,
        config: LevelConfig,
        rng: &mut R,
    ) -> Self {
        let name = format!("predictor.level{index}");
        let hid = config.hidden_channels;
        let input_adapter = Conv2d::pointwise(store, &format!("{name}.input_adapter"), config.tap_channels, hid, rng);
        let feedback_adapter = Conv2d::pointwise(store, &format!("{name}.feedback_adapter"), hid, hid, rng);
        let cells = match config.cell {
            CellKind::Convolutional => Cells::Conv(
                (0..config.n_cells)
                    .map(|k| ConvLstmCell::new(store, &format!("{name}.cell{k}"), hid, hid, config.kernel, rng))
                    .collect(),
            ),
            CellKind::Linear => {
                let flat = hid * config.map_size.0 * config.map_size.1;
                let lh = config.linear_hidden;
                let cells = (0..config.n_cells)
                    .map(|k| {
                        let input = if k == 0 { flat } else { lh };
                        LinearLstmCell::new(store, &format!("{name}.cell{k}"), input, lh, rng)
                    })
                    .collect();
                Cells::Dense { cells, output: Linear::new(store, &format!("{name}.output"), lh, flat, rng) }
            }
        };
        Level { index, config, input_adapter, feedback_adapter, cells }
    }

    pub fn new_state<'t, S: Scalar>(&self) -> LevelState<'t, S> {
        LevelState::new(self.config.n_cells)
    }

    /// Runs the cell stack once. Fails if `t` is not one of this level's
    /// ticks under `schedule`.
    pub fn level_step<'t, S: Scalar>(
        &self,
        schedule: &TickSchedule,
        t: usize,
        input: LevelInput<'t, S>,
        state: &mut LevelState<'t, S>,
    ) -> Result<Var<'t, S>> {
        if !schedule.active(self.index, t) {
            return Err(Error::Schedule(format!("level {} is not active at t={t}", self.index)));
        }
        let x = match input {
            LevelInput::Encoded(x) => self.input_adapter.forward(x),
            LevelInput::Feedback => {
                let prev = state
                    .output
                    .ok_or_else(|| Error::State(format!("level {} has no output to feed back", self.index)))?;
                self.feedback_adapter.forward(prev)
            }
        };
        let out = match &self.cells {
            Cells::Conv(cells) => {
                let mut h = x;
                for (cell, slot) in cells.iter().zip(state.cells.iter_mut()) {
                    let next = cell.step(h, *slot)?;
                    *slot = Some(next);
                    h = next.h;
                }
                h
            }
            Cells::Dense { cells, output } => {
                let s = x.shape();
                let mut h = x.reshape(&[s[0], s[1] * s[2] * s[3]]);
                for (cell, slot) in cells.iter().zip(state.cells.iter_mut()) {
                    let next = cell.step(h, *slot)?;
                    *slot = Some(next);
                    h = next.h;
                }
                output.forward(h).reshape(&s)
            }
        };
        state.output = Some(out);
        state.last_tick = Some(t);
        state.invocations += 1;
        Ok(out)
    }
}

/// Where the levels' inputs come from at a given timestep.
#[derive(Clone, Copy, Debug)]
pub enum TickSource<'t, S: Scalar> {
    /// Per-level encoder features of the current seed frame.
    Seed([Var<'t, S>; LEVELS]),
    /// Prediction phase: every level feeds back its own output.
    Feedback,
}

#[derive(Clone, Debug)]
pub struct PredictorState<'t, S: Scalar> {
    pub levels: Vec<LevelState<'t, S>>,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub levels: Vec<Level>,
    pub schedule: TickSchedule,
}

impl Predictor {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        configs: [LevelConfig; LEVELS],
        schedule: TickSchedule,
        rng: &mut R,
    ) -> Self {
        let levels = configs.into_iter().enumerate().map(|(i, c)| Level::new(store, i, c, rng)).collect();
        Predictor { levels, schedule }
    }

    pub fn new_state<'t, S: Scalar>(&self) -> PredictorState<'t, S> {
        PredictorState { levels: self.levels.iter().map(|l| l.new_state()).collect() }
    }

    /// Advances every level that is active at `t`; returns which levels ran.
    pub fn tick<'t, S: Scalar>(
        &self,
        t: usize,
        source: TickSource<'t, S>,
        state: &mut PredictorState<'t, S>,
    ) -> Result<[bool; LEVELS]> {
        if t == 0 {
            return Err(Error::Schedule("timesteps start at 1".into()));
        }
        let mut ran = [false; LEVELS];
        for (l, level) in self.levels.iter().enumerate() {
            if !self.schedule.active(l, t) {
                continue;
            }
            let input = match source {
                TickSource::Seed(taps) => LevelInput::Encoded(taps[l]),
                TickSource::Feedback => LevelInput::Feedback,
            };
            level.level_step(&self.schedule, t, input, &mut state.levels[l])?;
            ran[l] = true;
        }
        Ok(ran)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_everything_stays_zero() {
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "c", 3, 4, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[2, 3, 5, 5]));
        let s = cell.step(x, None).unwrap();
        assert!(s.h.value().data().iter().all(|&v| v == 0.0));
        assert!(s.c.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_mismatch_is_shape_error() {
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "c", 3, 4, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::with_params(&store);
        let s = cell.step(tape.constant(Tensor::zeros(&[1, 3, 5, 5])), None).unwrap();
        let err = cell.step(tape.constant(Tensor::zeros(&[1, 3, 4, 4])), Some(s)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn cell_memory_growth_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "c", 2, 3, 3, &mut rng);
        let tape = Tape::with_params(&store);
        let mut state = None;
        for _ in 0..5 {
            let x = tape.constant(Tensor::uniform(&[1, 2, 4, 4], 3.0, &mut rng));
            let next = cell.step(x, state).unwrap();
            if let Some(prev) = state {
                let (c0, c1) = (prev.c.value(), next.c.value());
                for (a, b) in c0.data().iter().zip(c1.data()) {
                    assert!(b.abs() <= a.abs() + 1.0);
                }
            }
            state = Some(next);
        }
    }

    /// With 1x1 kernels the convolutional cell is a scalar LSTM per pixel.
    #[test]
    fn pointwise_kernel_matches_per_pixel_lstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (cin, hid) = (2, 3);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "c", cin, hid, 1, &mut rng);
        store.set("c.gates.bias", Tensor::uniform(&[4 * hid], 0.5, &mut rng)).unwrap();
        let x = Tensor::uniform(&[2, cin, 3, 3], 1.0, &mut rng);
        let h0 = Tensor::uniform(&[2, hid, 3, 3], 1.0, &mut rng);
        let c0 = Tensor::uniform(&[2, hid, 3, 3], 1.0, &mut rng);

        let tape = Tape::with_params(&store);
        let state = CellState { h: tape.constant(h0.clone()), c: tape.constant(c0.clone()) };
        let out = cell.step(tape.constant(x.clone()), Some(state)).unwrap();
        let (h1, c1) = (out.h.value(), out.c.value());

        let w = store.get(cell.gates.weight).data().to_vec(); // [4*hid, cin+hid]
        let b = store.get(cell.gates.bias.unwrap()).data().to_vec();
        let at = |t: &Tensor<f64>, ch: usize, n: usize, bi: usize, p: usize| t.data()[(bi * ch + n) * 9 + p];
        for bi in 0..2 {
            for p in 0..9 {
                let input: Vec<f64> =
                    (0..cin).map(|k| at(&x, cin, k, bi, p)).chain((0..hid).map(|k| at(&h0, hid, k, bi, p))).collect();
                let pre = |row: usize| b[row] + (0..cin + hid).map(|k| w[row * (cin + hid) + k] * input[k]).sum::<f64>();
                for j in 0..hid {
                    let i = sigmoid(pre(j));
                    let f = sigmoid(pre(hid + j));
                    let o = sigmoid(pre(2 * hid + j));
                    let g = pre(3 * hid + j).tanh();
                    let c = f * at(&c0, hid, j, bi, p) + i * g;
                    let h = o * c.tanh();
                    assert!((c - at(&c1, hid, j, bi, p)).abs() < 1e-12);
                    assert!((h - at(&h1, hid, j, bi, p)).abs() < 1e-12);
                }
            }
        }
    }

    fn level(cell: CellKind) -> (ParamStore<f64>, Level) {
        let mut store = ParamStore::new();
        let cfg = LevelConfig {
            period: 1,
            n_cells: 4,
            hidden_channels: 128,
            kernel: 3,
            cell,
            tap_channels: 16,
            map_size: (4, 4),
            linear_hidden: 32,
        };
        let level = Level::new(&mut store, 0, cfg, &mut ChaCha8Rng::seed_from_u64(3));
        (store, level)
    }

    #[test]
    fn level_output_shape_and_accumulation() {
        let (store, level) = level(CellKind::Convolutional);
        let sched = TickSchedule::reference();
        let tape = Tape::with_params(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.constant(Tensor::uniform(&[2, 16, 4, 4], 1.0, &mut rng));
        let mut state = level.new_state();
        let once = level.level_step(&sched, 1, LevelInput::Encoded(x), &mut state).unwrap();
        assert_eq!(once.shape(), vec![2, 128, 4, 4]);
        let twice = level.level_step(&sched, 2, LevelInput::Encoded(x), &mut state).unwrap();
        assert_ne!(once.value().data(), twice.value().data());
        assert_eq!(state.invocations, 2);
    }

    #[test]
    fn zero_input_zero_bias_level_is_zero() {
        for kind in [CellKind::Convolutional, CellKind::Linear] {
            let (store, level) = level(kind);
            let tape = Tape::with_params(&store);
            let x = tape.constant(Tensor::zeros(&[1, 16, 4, 4]));
            let mut state = level.new_state();
            let out = level.level_step(&TickSchedule::reference(), 1, LevelInput::Encoded(x), &mut state).unwrap();
            assert!(out.value().data().iter().all(|&v| v == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn inactive_tick_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let cfg = LevelConfig {
            period: 4,
            n_cells: 1,
            hidden_channels: 2,
            kernel: 3,
            cell: CellKind::Convolutional,
            tap_channels: 2,
            map_size: (2, 2),
            linear_hidden: 2,
        };
        let level = Level::new(&mut store, 1, cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::with_params(&store);
        let mut state = level.new_state();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let err = level.level_step(&TickSchedule::reference(), 2, LevelInput::Encoded(x), &mut state).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
    }

    #[test]
    fn dense_level_keeps_vector_state() {
        let (store, level) = level(CellKind::Linear);
        let tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::full(&[2, 16, 4, 4], 0.3));
        let mut state = level.new_state();
        let out = level.level_step(&TickSchedule::reference(), 1, LevelInput::Encoded(x), &mut state).unwrap();
        assert_eq!(out.shape(), vec![2, 128, 4, 4]);
        assert_eq!(state.cells[0].unwrap().h.shape(), vec![2, 32]);
    }
}
