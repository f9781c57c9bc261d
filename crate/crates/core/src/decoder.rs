//! Transposed-convolution decoder with frame, heatmap and coordinate heads.

use rand::Rng;

use crate::autograd::{ConvGeom, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, GroupNorm, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::schedule::LEVELS;

const LEAK: f64 = 0.2;
const UP: ConvGeom = ConvGeom { k: 4, stride: 2, pad: 1 };

/// Most recent output of every level and the tick that produced it.
#[derive(Clone, Debug)]
pub struct FeatureReuseBuffer<'t, S: Scalar> {
    latest: [Option<(usize, Var<'t, S>)>; LEVELS],
}

impl<'t, S: Scalar> Default for FeatureReuseBuffer<'t, S> {
    fn default() -> Self {
        FeatureReuseBuffer { latest: [None; LEVELS] }
    }
}

impl<'t, S: Scalar> FeatureReuseBuffer<'t, S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&mut self, level: usize, t: usize, features: Var<'t, S>) {
        self.latest[level] = Some((t, features));
    }

    pub fn get(&self, level: usize) -> Result<Var<'t, S>> {
        self.latest[level]
            .map(|(_, v)| v)
            .ok_or_else(|| Error::State(format!("feature buffer has no entry for level {level}")))
    }

    /// Timestep of each level's entry.
    pub fn stamps(&self) -> [Option<usize>; LEVELS] {
        self.latest.map(|e| e.map(|(t, _)| t))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Encoder widths `[c1, c2, c3, c4]`.
    pub stage_channels: [usize; 4],
    pub out_channels: usize,
    /// Hidden width of each predictor level.
    pub level_channels: [usize; LEVELS],
    pub frame_size: (usize, usize),
    pub n_digits: usize,
    /// When false every level runs at the bottleneck resolution and is
    /// upsampled before fusion.
    pub spatial_hierarchy: bool,
}

impl DecoderConfig {
    fn level_factor(&self, level: usize) -> usize {
        if self.spatial_hierarchy {
            1
        } else {
            1 << (LEVELS - 1 - level)
        }
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    conv: ConvTranspose2d,
    norm: GroupNorm,
}

impl UpBlock {
    fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        UpBlock {
            conv: ConvTranspose2d::new(store, &format!("{name}.conv"), cin, cout, UP, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    fn forward<'t, S: Scalar>(&self, x: Var<'t, S>) -> Var<'t, S> {
        self.norm.forward(self.conv.forward(x)).leaky_relu(LEAK)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    skip_adapters: Vec<Conv2d>,
    frame_blocks: Vec<UpBlock>,
    frame_out: ConvTranspose2d,
    mid_blocks: Vec<UpBlock>,
    mid_out: Conv2d,
    high_out: Linear,
}

impl Decoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, config: &DecoderConfig, rng: &mut R) -> Self {
        let [c1, c2, c3, c4] = config.stage_channels;
        let [h0, h1, h2] = config.level_channels;
        let taps = [c2, c3, c4];
        let skip_adapters = (0..LEVELS)
            .map(|l| Conv2d::pointwise(store, &format!("decoder.skip_adapter{l}"), taps[l], config.level_channels[l], rng))
            .collect();
        let frame_blocks = vec![
            UpBlock::new(store, "decoder.frame.up2", h2, c3, rng),
            UpBlock::new(store, "decoder.frame.up1", c3 + h1, c2, rng),
            UpBlock::new(store, "decoder.frame.up0", c2 + h0, c1, rng),
        ];
        let frame_out = ConvTranspose2d::new(store, "decoder.frame.out", c1, config.out_channels, UP, rng);
        let mid_blocks = vec![
            UpBlock::new(store, "decoder.mid.up2", h2, c3, rng),
            UpBlock::new(store, "decoder.mid.up1", c3 + h1, c2, rng),
        ];
        let mid_out = Conv2d::new(store, "decoder.mid.out", c2, 1, ConvGeom { k: 3, stride: 1, pad: 1 }, rng);
        let (fh, fw) = config.frame_size;
        let high_out = Linear::new(store, "decoder.high.out", h2 * (fh / 16) * (fw / 16), 2 * config.n_digits, rng);
        Decoder { config: config.clone(), skip_adapters, frame_blocks, frame_out, mid_blocks, mid_out, high_out }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Level output at its native decoder resolution.
    fn level<'t, S: Scalar>(&self, buffer: &FeatureReuseBuffer<'t, S>, level: usize) -> Result<Var<'t, S>> {
        let v = buffer.get(level)?;
        Ok(match self.config.level_factor(level) {
            1 => v,
            f => v.upsample_nearest(f),
        })
    }

    /// Next frame `[B, out_channels, H, W]` in `[0, 1]`.
    ///
    /// `skip` holds the encoder taps of the last seed frame; they are
    /// added to the level outputs before fusion.
    pub fn decode_frame<'t, S: Scalar>(
        &self,
        buffer: &FeatureReuseBuffer<'t, S>,
        skip: &[Var<'t, S>; LEVELS],
    ) -> Result<Var<'t, S>> {
        let mut fused = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let x = self.level(buffer, l)?;
            let s = self.skip_adapters[l].forward(skip[l]);
            if x.shape() != s.shape() {
                return Err(Error::Shape(format!(
                    "level {l} output {:?} does not match skip features {:?}",
                    x.shape(),
                    s.shape()
                )));
            }
            fused.push(x.add(s));
        }
        let d = self.frame_blocks[0].forward(fused[2]);
        let d = self.frame_blocks[1].forward(Var::concat(&[d, fused[1]]));
        let d = self.frame_blocks[2].forward(Var::concat(&[d, fused[0]]));
        Ok(self.frame_out.forward(d).sigmoid())
    }

    /// Heatmap `[B, 1, H/4, W/4]` from levels 1 and 2.
    pub fn decode_mid<'t, S: Scalar>(&self, buffer: &FeatureReuseBuffer<'t, S>) -> Result<Var<'t, S>> {
        let d = self.mid_blocks[0].forward(self.level(buffer, 2)?);
        let d = self.mid_blocks[1].forward(Var::concat(&[d, self.level(buffer, 1)?]));
        Ok(self.mid_out.forward(d).sigmoid())
    }

    /// Normalized digit centers `[B, 2 * n_digits]` from level 2 alone.
    pub fn decode_high<'t, S: Scalar>(&self, buffer: &FeatureReuseBuffer<'t, S>) -> Result<Var<'t, S>> {
        let x = buffer.get(2)?;
        let s = x.shape();
        Ok(self.high_out.forward(x.reshape(&[s[0], s[1..].iter().product()])).sigmoid())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    fn setup(spatial: bool) -> (ParamStore<f64>, Decoder) {
        let cfg = DecoderConfig {
            stage_channels: [4, 4, 8, 8],
            out_channels: 3,
            level_channels: [4, 4, 4],
            frame_size: (32, 32),
            n_digits: 2,
            spatial_hierarchy: spatial,
        };
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        (store, dec)
    }

    fn inputs(seed: u64, spatial: bool) -> ([Tensor<f64>; 3], [Tensor<f64>; 3]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = if spatial { [8, 4, 2] } else { [2, 2, 2] };
        let levels = sizes.map(|n| Tensor::uniform(&[2, 4, n, n], 1.0, &mut rng));
        let skip = [(4, 8), (8, 4), (8, 2)].map(|(c, n)| Tensor::uniform(&[2, c, n, n], 1.0, &mut rng));
        (levels, skip)
    }

    type Outs = (Tensor<f64>, Tensor<f64>, Tensor<f64>);

    fn run(store: &ParamStore<f64>, dec: &Decoder, levels: &[Tensor<f64>; 3], skip: &[Tensor<f64>; 3]) -> Outs {
        let tape = Tape::with_params(store);
        let mut buf = FeatureReuseBuffer::new();
        for (l, x) in levels.iter().enumerate() {
            buf.store(l, 17, tape.constant(x.clone()));
        }
        let skip = skip.clone().map(|s| tape.constant(s));
        let f = dec.decode_frame(&buf, &skip).unwrap();
        let m = dec.decode_mid(&buf).unwrap();
        let h = dec.decode_high(&buf).unwrap();
        ((*f.value()).clone(), (*m.value()).clone(), (*h.value()).clone())
    }

    #[test]
    fn output_shapes_and_ranges() {
        for spatial in [true, false] {
            let (store, dec) = setup(spatial);
            let (levels, skip) = inputs(1, spatial);
            let (f, m, h) = run(&store, &dec, &levels, &skip);
            assert_eq!(f.shape(), &[2, 3, 32, 32]);
            assert_eq!(m.shape(), &[2, 1, 8, 8]);
            assert_eq!(h.shape(), &[2, 4]);
            for t in [&f, &m, &h] {
                assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn zero_features_give_constant_image() {
        let (store, dec) = setup(true);
        let (levels, skip) = inputs(1, true);
        let levels = levels.map(|t| Tensor::zeros(t.shape()));
        let skip = skip.map(|t| Tensor::zeros(t.shape()));
        let (f, _, _) = run(&store, &dec, &levels, &skip);
        let first = f.data()[0];
        assert!(f.data().iter().all(|&v| v == first));
        assert_eq!(first, 0.5);
    }

    #[test]
    fn heads_consume_only_their_levels() {
        let (store, dec) = setup(true);
        let (levels, skip) = inputs(2, true);
        let (f, m, h) = run(&store, &dec, &levels, &skip);

        let mut l0 = levels.clone();
        l0[0] = l0[0].map(|v| v + 0.3);
        let (f0, m0, h0) = run(&store, &dec, &l0, &skip);
        assert_ne!(f0, f);
        assert_eq!(m0, m);
        assert_eq!(h0, h);

        let mut l1 = levels.clone();
        l1[1] = l1[1].map(|v| v - 0.3);
        let (_, m1, h1) = run(&store, &dec, &l1, &skip);
        assert_ne!(m1, m);
        assert_eq!(h1, h);

        let mut l2 = levels.clone();
        l2[2] = l2[2].map(|v| v * 1.5);
        let (f2, m2, h2) = run(&store, &dec, &l2, &skip);
        assert_ne!(f2, f);
        assert_ne!(m2, m);
        assert_ne!(h2, h);
    }

    #[test]
    fn unpopulated_buffer_is_state_error() {
        let (store, dec) = setup(true);
        let tape = Tape::with_params(&store);
        let buf = FeatureReuseBuffer::<f64>::new();
        assert!(matches!(dec.decode_high(&buf), Err(Error::State(_))));
        assert!(matches!(dec.decode_mid(&buf), Err(Error::State(_))));
        let (_, skip) = inputs(0, true);
        let skip = skip.map(|s| tape.constant(s));
        assert!(matches!(dec.decode_frame(&buf, &skip), Err(Error::State(_))));
    }
}
