//! Four-stage convolutional encoder producing a three-level feature pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderStyle {
    /// Strided 4x4 convolutions, as in a DCGAN discriminator.
    Dcgan,
    /// Two 3x3 convolutions followed by 2x2 max pooling per stage.
    VggLike,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub style: EncoderStyle,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { in_channels: 3, stage_channels: [32, 64, 128, 256], style: EncoderStyle::Dcgan }
    }
}

impl EncoderConfig {
    /// Channel widths of the low, mid and high taps.
    pub fn tap_channels(&self) -> [usize; 3] {
        [self.stage_channels[1], self.stage_channels[2], self.stage_channels[3]]
    }
}

/// Encoder taps after stages 2, 3 and 4: `H/4`, `H/8` and `H/16`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'t, S: Scalar> {
    pub low: Var<'t, S>,
    pub mid: Var<'t, S>,
    pub high: Var<'t, S>,
}

impl<'t, S: Scalar> FeaturePyramid<'t, S> {
    pub fn taps(&self) -> [Var<'t, S>; 3] {
        [self.low, self.mid, self.high]
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Strided { conv: Conv2d, norm: Option<GroupNorm> },
    Pooled { conv1: Conv2d, norm1: GroupNorm, conv2: Conv2d, norm2: GroupNorm },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Stage>,
}

pub fn check_spatial(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        return Err(Error::Shape(format!(
            "frame size {height}x{width}: height and width must be positive multiples of 16"
        )));
    }
    Ok(())
}

impl Encoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, config: &EncoderConfig, rng: &mut R) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut cin = config.in_channels;
        for (i, &cout) in config.stage_channels.iter().enumerate() {
            let name = format!("encoder.stage{}", i + 1);
            let stage = match config.style {
                EncoderStyle::Dcgan => Stage::Strided {
                    conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, ConvGeom { k: 4, stride: 2, pad: 1 }, rng),
                    norm: (i > 0).then(|| GroupNorm::new(store, &format!("{name}.norm"), cout)),
                },
                EncoderStyle::VggLike => {
                    let g = ConvGeom { k: 3, stride: 1, pad: 1 };
                    Stage::Pooled {
                        conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, g, rng),
                        norm1: GroupNorm::new(store, &format!("{name}.norm1"), cout),
                        conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, g, rng),
                        norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
                    }
                }
            };
            stages.push(stage);
            cin = cout;
        }
        Encoder { config: config.clone(), stages }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes a batch of frames `[B, C, H, W]`.
    pub fn encode<'t, S: Scalar>(&self, frames: Var<'t, S>) -> Result<FeaturePyramid<'t, S>> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects [B, {}, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        check_spatial(shape[2], shape[3])?;
        let mut x = frames;
        let mut taps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            x = match stage {
                Stage::Strided { conv, norm } => {
                    let y = conv.forward(x);
                    let y = match norm {
                        Some(n) => n.forward(y),
                        None => y,
                    };
                    y.leaky_relu(LEAK)
                }
                Stage::Pooled { conv1, norm1, conv2, norm2 } => {
                    let y = norm1.forward(conv1.forward(x)).leaky_relu(LEAK);
                    norm2.forward(conv2.forward(y)).leaky_relu(LEAK).max_pool2()
                }
            };
            if i >= 1 {
                taps.push(x);
            }
        }
        Ok(FeaturePyramid { low: taps[0], mid: taps[1], high: taps[2] })
    }

    /// Runs [`Encoder::encode`] outside of any training graph.
    pub fn encode_tensor<S: Scalar>(&self, params: &ParamStore<S>, frames: &Tensor<S>) -> Result<[Tensor<S>; 3]> {
        let tape = Tape::with_params(params);
        let p = self.encode(tape.constant(frames.clone()))?;
        Ok(p.taps().map(|v| (*v.value()).clone()))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn build(style: EncoderStyle, in_channels: usize, widths: [usize; 4]) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { in_channels, stage_channels: widths, style };
        let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        (store, enc)
    }

    #[test]
    fn pyramid_shapes() {
        for style in [EncoderStyle::Dcgan, EncoderStyle::VggLike] {
            let (store, enc) = build(style, 3, [4, 4, 8, 8]);
            for (n, expect) in [(64, [16, 8, 4]), (32, [8, 4, 2])] {
                let x = Tensor::zeros(&[1, 3, n, n]);
                let taps = enc.encode_tensor(&store, &x).unwrap();
                for (t, e) in taps.iter().zip(expect) {
                    assert_eq!(&t.shape()[2..], &[e, e], "{style:?} {n}");
                }
            }
        }
    }

    #[test]
    fn indivisible_size_is_shape_error() {
        let (store, enc) = build(EncoderStyle::Dcgan, 3, [4, 4, 4, 4]);
        let err = enc.encode_tensor(&store, &Tensor::zeros(&[1, 3, 63, 64])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("16"));
    }

    #[test]
    fn batch_equivariance() {
        let (store, enc) = build(EncoderStyle::Dcgan, 3, [4, 8, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Tensor::uniform(&[3, 3, 32, 32], 1.0, &mut rng);
        let joint = enc.encode_tensor(&store, &batch).unwrap();
        for b in 0..3 {
            let single = batch.index0(b).reshape(&[1, 3, 32, 32]).unwrap();
            let alone = enc.encode_tensor(&store, &single).unwrap();
            for (j, a) in joint.iter().zip(&alone) {
                let part = j.index0(b);
                for (x, y) in part.data().iter().zip(a.data()) {
                    assert!((x - y).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (store, enc) = build(EncoderStyle::Dcgan, 2, [4, 4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[1, 2, 16, 16], 1.0, &mut rng);
        let probes: Vec<Tensor<f64>> = [[1, 4, 4, 4], [1, 4, 2, 2], [1, 4, 1, 1]]
            .iter()
            .map(|s| Tensor::uniform(s, 1.0, &mut rng))
            .collect();
        let objective = |tape: &Tape<f64>, input: Var<'_, f64>| -> f64 {
            let _ = tape;
            let p = enc.encode(input).unwrap();
            p.taps()
                .iter()
                .zip(&probes)
                .map(|(v, w)| v.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let tape = Tape::with_params(&store);
        let leaf = tape.leaf(x.clone());
        let p = enc.encode(leaf).unwrap();
        let mut total = None;
        for (v, w) in p.taps().iter().zip(&probes) {
            let term = v.mul(tape.constant(w.clone())).sum();
            total = Some(match total {
                None => term,
                Some(t) => term.add(t),
            });
        }
        let grads = tape.backward(total.unwrap());
        let analytic = grads.of(leaf).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..x.numel()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let t1 = Tape::with_params(&store);
            let fp = objective(&t1, t1.constant(xp));
            let t2 = Tape::with_params(&store);
            let fm = objective(&t2, t2.constant(xm));
            let num = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }
}
