//! Seedable bouncing-digit sequences with center and heatmap targets.
//!
//! Every sequence is a pure function of `(seed, index)`: the generator
//! for sequence `i` is a ChaCha8 stream seeded with `seed` on stream `i`.

pub(crate) mod container;
mod glyphs;

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use container::{read_container, write_container, ContainerHeader, CONTAINER_VERSION};
pub use glyphs::{font_cell, load_digit_glyphs, DigitGlyphSet, MnistSplit, GLYPH_SIZE};

use crate::error::{Error, Result};
use crate::schedule::TickSchedule;
use crate::tensor::Tensor;

pub const MIN_SPEED: f64 = 2.0;
pub const MAX_SPEED: f64 = 5.0;

/// Top-left glyph position and per-frame velocity, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl TrajectoryState {
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

/// Canvas size `(height, width)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

impl Canvas {
    pub const fn square(n: usize) -> Self {
        Canvas { height: n, width: n }
    }
}

pub fn init_trajectory<R: Rng + ?Sized>(rng: &mut R, canvas: Canvas, glyph: usize) -> Result<TrajectoryState> {
    if canvas.width < glyph || canvas.height < glyph {
        return Err(Error::Argument(format!(
            "canvas {}x{} is smaller than the {glyph}px glyph",
            canvas.height, canvas.width
        )));
    }
    let x = rng.gen_range(0.0..=(canvas.width - glyph) as f64);
    let y = rng.gen_range(0.0..=(canvas.height - glyph) as f64);
    let speed = rng.gen_range(MIN_SPEED..=MAX_SPEED);
    let angle = rng.gen_range(0.0..TAU);
    Ok(TrajectoryState { x, y, vx: speed * angle.cos(), vy: speed * angle.sin() })
}

/// Moves `p` by `v` inside `[0, limit]`, mirroring any overshoot.
fn reflect(p: f64, v: f64, limit: f64) -> (f64, f64) {
    if limit <= 0.0 {
        return (0.0, v);
    }
    let (mut p, mut v) = (p + v, v);
    loop {
        if p > limit {
            p = 2.0 * limit - p;
            v = -v;
        } else if p < 0.0 {
            p = -p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

pub fn step_trajectory(state: TrajectoryState, canvas: Canvas, glyph: usize) -> TrajectoryState {
    let (x, vx) = reflect(state.x, state.vx, canvas.width.saturating_sub(glyph) as f64);
    let (y, vy) = reflect(state.y, state.vy, canvas.height.saturating_sub(glyph) as f64);
    TrajectoryState { x, y, vx, vy }
}

/// One generated sequence and its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSequence {
    /// `[T, 3, H, W]`, grayscale replicated over channels.
    pub frames: Tensor<f32>,
    /// `centers[t][d] = (x, y)` glyph centers in pixels.
    pub centers: Vec<Vec<[f64; 2]>>,
    /// `[T, 1, h, w]` center heatmaps.
    pub mid_targets: Tensor<f32>,
    /// `[T, 2 * n_digits]` centers divided by canvas size, `(x, y)` per digit.
    pub high_targets: Tensor<f32>,
    /// Digit labels in target order.
    pub labels: Vec<u8>,
}

impl AnnotatedSequence {
    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame at 1-based timestep `t`, shape `[3, H, W]`.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.index0(t - 1)
    }
}

/// Composites `glyphs` moving along `states` into `T` frames.
///
/// Digits are drawn at their rounded positions; overlapping pixels take
/// the maximum. The caller's ordering of digits is kept.
pub fn render_sequence(
    glyphs: &DigitGlyphSet,
    digits: &[(usize, TrajectoryState)],
    steps: usize,
    canvas: Canvas,
    targets: TargetSpec,
) -> AnnotatedSequence {
    let (h, w) = (canvas.height, canvas.width);
    let mut frames = Tensor::zeros(&[steps, 3, h, w]);
    let mut centers = Vec::with_capacity(steps);
    let mut states: Vec<TrajectoryState> = digits.iter().map(|d| d.1).collect();
    for t in 0..steps {
        let mut plane = vec![0f32; h * w];
        let mut frame_centers = Vec::with_capacity(digits.len());
        for ((glyph, _), s) in digits.iter().zip(&states) {
            let (ox, oy) = (s.x.round() as usize, s.y.round() as usize);
            for r in 0..GLYPH_SIZE.min(h - oy) {
                for c in 0..GLYPH_SIZE.min(w - ox) {
                    let v = glyphs.pixel(*glyph, r, c);
                    let dst = &mut plane[(oy + r) * w + ox + c];
                    *dst = dst.max(v);
                }
            }
            let half = GLYPH_SIZE as f64 / 2.0;
            frame_centers.push([s.x + half, s.y + half]);
        }
        let base = t * 3 * h * w;
        for ch in 0..3 {
            frames.data_mut()[base + ch * h * w..base + (ch + 1) * h * w].copy_from_slice(&plane);
        }
        centers.push(frame_centers);
        for s in states.iter_mut() {
            *s = step_trajectory(*s, canvas, GLYPH_SIZE);
        }
    }
    let (mid_targets, high_targets) = make_targets(&centers, canvas, targets);
    AnnotatedSequence {
        frames,
        centers,
        mid_targets,
        high_targets,
        labels: digits.iter().map(|(g, _)| glyphs.label(*g)).collect(),
    }
}

/// Resolution and spread of the center heatmaps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetSpec {
    pub height: usize,
    pub width: usize,
    /// Gaussian standard deviation, in heatmap cells.
    pub sigma: f64,
}

impl TargetSpec {
    /// Heatmaps at a quarter of the canvas resolution.
    pub fn for_canvas(canvas: Canvas, sigma: f64) -> Self {
        TargetSpec { height: canvas.height / 4, width: canvas.width / 4, sigma }
    }
}

/// Continuous heatmap-cell coordinates `(col, row)` of a pixel position.
///
/// Cell `j` covers pixels `[j * cell, (j + 1) * cell)` and its center
/// maps to exactly `j`.
pub fn project_center(center: [f64; 2], canvas: Canvas, spec: TargetSpec) -> (f64, f64) {
    let cw = canvas.width as f64 / spec.width as f64;
    let ch = canvas.height as f64 / spec.height as f64;
    (center[0] / cw - 0.5, center[1] / ch - 0.5)
}

/// Heatmaps (sum of unit-peak Gaussians, clamped to 1) and normalized
/// coordinates for per-frame center lists.
pub fn make_targets(centers: &[Vec<[f64; 2]>], canvas: Canvas, spec: TargetSpec) -> (Tensor<f32>, Tensor<f32>) {
    let steps = centers.len();
    let n = centers.first().map_or(0, |c| c.len());
    let (hh, hw) = (spec.height, spec.width);
    let mut mid = Tensor::zeros(&[steps, 1, hh, hw]);
    let mut high = Tensor::zeros(&[steps, 2 * n]);
    let inv = 1.0 / (2.0 * spec.sigma * spec.sigma);
    for (t, frame) in centers.iter().enumerate() {
        let cells: Vec<(f64, f64)> = frame.iter().map(|&c| project_center(c, canvas, spec)).collect();
        for i in 0..hh {
            for j in 0..hw {
                let v: f64 = cells
                    .iter()
                    .map(|&(u, v)| (-((j as f64 - u).powi(2) + (i as f64 - v).powi(2)) * inv).exp())
                    .sum();
                mid.data_mut()[(t * hh + i) * hw + j] = v.clamp(0.0, 1.0) as f32;
            }
        }
        for (d, c) in frame.iter().enumerate() {
            high.data_mut()[t * 2 * n + 2 * d] = (c[0] / canvas.width as f64) as f32;
            high.data_mut()[t * 2 * n + 2 * d + 1] = (c[1] / canvas.height as f64) as f32;
        }
    }
    (mid, high)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_sequences: usize,
    pub sequence_length: usize,
    pub n_digits: usize,
    pub canvas: Canvas,
    pub targets: TargetSpec,
}

impl DatasetSpec {
    pub fn new(seed: u64, n_sequences: usize, sequence_length: usize) -> Self {
        let canvas = Canvas::square(64);
        DatasetSpec {
            seed,
            n_sequences,
            sequence_length,
            n_digits: 2,
            canvas,
            targets: TargetSpec::for_canvas(canvas, 1.5),
        }
    }

    pub fn validate(&self, schedule: &TickSchedule) -> Result<()> {
        schedule.check_sequence_length(self.sequence_length)?;
        if self.n_digits == 0 {
            return Err(Error::Config("n_digits must be at least 1".into()));
        }
        if self.canvas.height < GLYPH_SIZE || self.canvas.width < GLYPH_SIZE {
            return Err(Error::Config(format!("canvas must be at least {GLYPH_SIZE}px")));
        }
        Ok(())
    }
}

/// Generates sequence `index` of the dataset described by `spec`.
pub fn generate_sequence(spec: &DatasetSpec, glyphs: &DigitGlyphSet, index: u64) -> Result<AnnotatedSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut digits = Vec::with_capacity(spec.n_digits);
    for _ in 0..spec.n_digits {
        let g = rng.gen_range(0..glyphs.len());
        let s = init_trajectory(&mut rng, spec.canvas, GLYPH_SIZE)?;
        digits.push((g, s));
    }
    // regression targets are ordered by label, then initial x
    digits.sort_by(|a, b| glyphs.label(a.0).cmp(&glyphs.label(b.0)).then(a.1.x.total_cmp(&b.1.x)));
    Ok(render_sequence(glyphs, &digits, spec.sequence_length, spec.canvas, spec.targets))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetMode {
    /// Unbounded stream of fresh sequences.
    Train,
    /// Exactly `n_sequences` sequences.
    Test,
}

/// Iterator over generated sequences, keyed by `(seed, index)`.
#[derive(Clone)]
pub struct SequenceStream {
    spec: DatasetSpec,
    glyphs: Arc<DigitGlyphSet>,
    next: u64,
    end: Option<u64>,
}

impl SequenceStream {
    /// Sequence at an arbitrary index, independent of iteration state.
    pub fn get(&self, index: u64) -> AnnotatedSequence {
        generate_sequence(&self.spec, &self.glyphs, index).expect("spec validated at construction")
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }
}

impl Iterator for SequenceStream {
    type Item = AnnotatedSequence;

    fn next(&mut self) -> Option<AnnotatedSequence> {
        if self.end.is_some_and(|e| self.next >= e) {
            return None;
        }
        let s = self.get(self.next);
        self.next += 1;
        Some(s)
    }
}

pub fn build_dataset(
    spec: DatasetSpec,
    glyphs: Arc<DigitGlyphSet>,
    schedule: &TickSchedule,
    mode: DatasetMode,
) -> Result<SequenceStream> {
    spec.validate(schedule)?;
    let end = match mode {
        DatasetMode::Train => None,
        DatasetMode::Test => Some(spec.n_sequences as u64),
    };
    Ok(SequenceStream { spec, glyphs, next: 0, end })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glyphs() -> Arc<DigitGlyphSet> {
        Arc::new(DigitGlyphSet::synthetic(3, 11))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_trajectory(&mut ChaCha8Rng::seed_from_u64(5), Canvas::square(64), 28).unwrap();
        let b = init_trajectory(&mut ChaCha8Rng::seed_from_u64(5), Canvas::square(64), 28).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let s = init_trajectory(&mut rng, Canvas::square(64), 28).unwrap();
            assert!((0.0..=36.0).contains(&s.x) && (0.0..=36.0).contains(&s.y));
        }
    }

    #[test]
    fn init_rejects_small_canvas() {
        let err = init_trajectory(&mut ChaCha8Rng::seed_from_u64(1), Canvas::square(20), 28);
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn speed_distribution_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let speeds: Vec<f64> = (0..10_000)
            .map(|_| init_trajectory(&mut rng, Canvas::square(64), 28).unwrap().speed())
            .collect();
        assert!(speeds.iter().all(|&s| (2.0 - 1e-12..=5.0 + 1e-12).contains(&s)));
        let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
        assert!((mean - 3.5).abs() < 0.05, "mean speed {mean}");
    }

    #[test]
    fn interior_step() {
        let s = step_trajectory(TrajectoryState { x: 10.0, y: 10.0, vx: 2.0, vy: 3.0 }, Canvas::square(64), 28);
        assert_eq!(s, TrajectoryState { x: 12.0, y: 13.0, vx: 2.0, vy: 3.0 });
    }

    #[test]
    fn wall_reflection() {
        let s = step_trajectory(TrajectoryState { x: 35.0, y: 10.0, vx: 3.0, vy: 0.0 }, Canvas::square(64), 28);
        assert_eq!(s, TrajectoryState { x: 34.0, y: 10.0, vx: -3.0, vy: 0.0 });
    }

    #[test]
    fn corner_reflection_keeps_speed() {
        let before = TrajectoryState { x: 35.0, y: 35.0, vx: 3.0, vy: 3.0 };
        let s = step_trajectory(before, Canvas::square(64), 28);
        assert_eq!((s.x, s.y, s.vx, s.vy), (34.0, 34.0, -3.0, -3.0));
        assert!((s.speed() - before.speed()).abs() < 1e-12);
    }

    #[test]
    fn static_digit_gives_identical_frames() {
        let g = glyphs();
        let st = TrajectoryState { x: 5.0, y: 7.0, vx: 0.0, vy: 0.0 };
        let seq = render_sequence(&g, &[(0, st)], 3, Canvas::square(64), TargetSpec::for_canvas(Canvas::square(64), 1.5));
        assert_eq!(seq.frame(1), seq.frame(2));
        assert_eq!(seq.frame(2), seq.frame(3));
        assert!(seq.centers.iter().all(|c| c[0] == [19.0, 21.0]));
    }

    #[test]
    fn overlap_takes_pixelwise_max() {
        let g = glyphs();
        let st = TrajectoryState { x: 10.0, y: 10.0, vx: 0.0, vy: 0.0 };
        let canvas = Canvas::square(64);
        let spec = TargetSpec::for_canvas(canvas, 1.5);
        let both = render_sequence(&g, &[(0, st), (1, st)], 1, canvas, spec);
        let a = render_sequence(&g, &[(0, st)], 1, canvas, spec);
        let b = render_sequence(&g, &[(1, st)], 1, canvas, spec);
        for i in 0..both.frames.numel() {
            assert_eq!(both.frames.data()[i], a.frames.data()[i].max(b.frames.data()[i]));
        }
    }

    #[test]
    fn heatmap_peak_at_projected_cell() {
        let canvas = Canvas::square(64);
        let spec = TargetSpec::for_canvas(canvas, 1.5);
        // cell (row 5, col 9) has its center at pixel (9.5 * 4, 5.5 * 4)
        let (mid, _) = make_targets(&[vec![[38.0, 22.0]]], canvas, spec);
        let (argmax, max) = mid
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(max, 1.0);
        assert_eq!(argmax, 5 * 16 + 9);
    }

    #[test]
    fn midpoint_center_normalizes_to_half() {
        let canvas = Canvas::square(64);
        let (_, high) = make_targets(&[vec![[32.0, 32.0]]], canvas, TargetSpec::for_canvas(canvas, 1.5));
        assert_eq!(high.data(), &[0.5, 0.5]);
    }

    #[test]
    fn coincident_centers_are_clamped() {
        let canvas = Canvas::square(64);
        let (mid, _) = make_targets(&[vec![[30.0, 30.0], [30.0, 30.0]]], canvas, TargetSpec::for_canvas(canvas, 1.5));
        assert!(mid.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_determinism_and_length_check() {
        let schedule = TickSchedule::reference();
        let spec = DatasetSpec::new(1, 4, 57);
        let a: Vec<_> = build_dataset(spec, glyphs(), &schedule, DatasetMode::Test).unwrap().collect();
        let b: Vec<_> = build_dataset(spec, glyphs(), &schedule, DatasetMode::Test).unwrap().collect();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        let err = build_dataset(DatasetSpec::new(1, 4, 40), glyphs(), &schedule, DatasetMode::Test).err().unwrap();
        assert!(err.to_string().contains("57"));
        let mut train = build_dataset(spec, glyphs(), &schedule, DatasetMode::Train).unwrap();
        assert_eq!(train.nth(10).unwrap(), train.get(10));
    }

    #[test]
    fn digits_ordered_by_label() {
        let g = glyphs();
        let spec = DatasetSpec::new(3, 0, 20);
        for i in 0..50 {
            let s = generate_sequence(&spec, &g, i).unwrap();
            assert!(s.labels[0] <= s.labels[1]);
        }
    }
}
