//! Learned perceptual distance with pluggable feature extractors.
//!
//! Images in [0, 1] are mapped to [-1, 1] before feature extraction, so a
//! black background is a nonzero vector and survives the normalization below.
//! A plugin turns that image `[C, H, W]` into a list of feature stages and
//! supplies one weight per channel per stage. The distance is
//!
//! ```text
//! sum over stages of mean over (c, y, x) of w_c * (f1 - f2)^2
//! ```
//!
//! where `f1`, `f2` are the stage features scaled to unit length along
//! the channel axis at each position.
//!
//! Weight files are JSON:
//!
//! ```json
//! {
//!   "name": "my-backbone",
//!   "stages": [
//!     { "name": "conv1", "shape": [8, 3, 3, 3], "weight": [...], "bias": [...],
//!       "stride": 2, "pad": 1, "lin": [...] }
//!   ],
//!   "digest": "<sha256 hex of the compact JSON of `stages`>"
//! }
//! ```
//!
//! Each stage is a convolution followed by ReLU applied to the previous
//! stage's output; `lin` holds the per-channel distance weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ConvGeom, Tape};
use crate::datagen::container::hex;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EPS: f64 = 1e-10;

pub trait LpipsPlugin: Send + Sync {
    fn name(&self) -> String;
    fn digest(&self) -> String;
    /// Feature stages of one `[C, H, W]` image, each `[C_l, H_l, W_l]`.
    fn features(&self, image: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
    /// Per-channel weights of each stage.
    fn weights(&self) -> Vec<Vec<f64>>;
}

/// Raw pixels as the only stage, unit weights.
#[derive(Clone, Copy, Debug)]
pub struct IdentityPlugin;

impl LpipsPlugin for IdentityPlugin {
    fn name(&self) -> String {
        "identity".into()
    }

    fn digest(&self) -> String {
        "identity".into()
    }

    fn features(&self, image: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![image.clone()])
    }

    fn weights(&self) -> Vec<Vec<f64>> {
        // sized lazily in `lpips`; an empty list means all ones
        vec![Vec::new()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub name: String,
    pub shape: [usize; 4],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub pad: usize,
    pub lin: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvPlugin {
    pub name: String,
    pub stages: Vec<ConvStage>,
    pub digest: String,
}

impl ConvPlugin {
    pub fn stages_digest(stages: &[ConvStage]) -> String {
        hex(&Sha256::digest(serde_json::to_vec(stages).expect("stages serialize")))
    }

    pub fn new(name: impl Into<String>, stages: Vec<ConvStage>) -> Result<Self> {
        for s in &stages {
            let [o, i, k, k2] = s.shape;
            if k != k2 || s.weight.len() != o * i * k * k || s.bias.len() != o || s.lin.len() != o || s.stride == 0 {
                return Err(Error::Config(format!("plugin stage {} has inconsistent sizes", s.name)));
            }
        }
        let digest = Self::stages_digest(&stages);
        Ok(ConvPlugin { name: name.into(), stages, digest })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!(
                    "LPIPS weight file {} not found; pass a JSON weight file (see the metrics::lpips docs) \
                     or use the built-in `identity` plugin",
                    path.display()
                ))
            } else {
                Error::io(path, e)
            }
        })?;
        let plugin: ConvPlugin = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if Self::stages_digest(&plugin.stages) != plugin.digest {
            return Err(Error::Checksum { path: path.to_path_buf() });
        }
        ConvPlugin::new(plugin.name, plugin.stages)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self).expect("plugin serializes")).map_err(|e| Error::io(path, e))
    }
}

impl LpipsPlugin for ConvPlugin {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn digest(&self) -> String {
        self.digest.clone()
    }

    fn features(&self, image: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let tape = Tape::<f64>::new();
        let s = image.shape();
        let mut x = tape.constant(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
        let mut out = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            if x.shape()[1] != st.shape[1] {
                return Err(Error::Shape(format!("plugin stage {} expects {} channels", st.name, st.shape[1])));
            }
            let w = tape.constant(Tensor::from_vec(&st.shape, st.weight.clone())?);
            let b = tape.constant(Tensor::from_vec(&[st.shape[0]], st.bias.clone())?);
            x = x.conv2d(w, Some(b), ConvGeom { k: st.shape[2], stride: st.stride, pad: st.pad }).leaky_relu(0.0);
            let v = x.value();
            out.push(v.index0(0));
        }
        Ok(out)
    }

    fn weights(&self) -> Vec<Vec<f64>> {
        self.stages.iter().map(|s| s.lin.clone()).collect()
    }
}

/// `"identity"` or a path to a JSON weight file.
pub fn load_plugin(spec: &str) -> Result<Box<dyn LpipsPlugin>> {
    match spec {
        "identity" => Ok(Box::new(IdentityPlugin)),
        "" => Err(Error::Config(
            "no LPIPS plugin configured; set eval.lpips_plugin to `identity` or to a JSON weight file".into(),
        )),
        path => Ok(Box::new(ConvPlugin::load(path)?)),
    }
}

fn unit_channels(f: &Tensor<f64>) -> Tensor<f64> {
    let (c, hw) = (f.dim(0), f.numel() / f.dim(0));
    let mut out = f.clone();
    for p in 0..hw {
        let n = (0..c).map(|k| f.data()[k * hw + p].powi(2)).sum::<f64>().sqrt();
        for k in 0..c {
            out.data_mut()[k * hw + p] /= n + EPS;
        }
    }
    out
}

/// Perceptual distance between two `[C, H, W]` images.
pub fn lpips<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, plugin: &dyn LpipsPlugin) -> Result<f64> {
    super::check_pair(pred, target)?;
    if pred.rank() != 3 {
        return Err(Error::Shape(format!("lpips expects [C, H, W], got {:?}", pred.shape())));
    }
    let signed = |t: &Tensor<S>| t.cast::<f64>().map(|v| 2.0 * v - 1.0);
    let fa = plugin.features(&signed(pred))?;
    let fb = plugin.features(&signed(target))?;
    let weights = plugin.weights();
    let mut total = 0.0;
    for ((a, b), w) in fa.iter().zip(&fb).zip(&weights) {
        let (a, b) = (unit_channels(a), unit_channels(b));
        let (c, hw) = (a.dim(0), a.numel() / a.dim(0));
        let mut acc = 0.0;
        for k in 0..c {
            let wk = w.get(k).copied().unwrap_or(1.0);
            for p in 0..hw {
                acc += wk * (a.data()[k * hw + p] - b.data()[k * hw + p]).powi(2);
            }
        }
        total += acc / a.numel() as f64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn image(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::uniform(&[3, 12, 12], 0.5, rng).map(|v| v + 0.5)
    }

    fn toy_plugin(rng: &mut ChaCha8Rng) -> ConvPlugin {
        let stage = |name: &str, o: usize, i: usize, rng: &mut ChaCha8Rng| ConvStage {
            name: name.into(),
            shape: [o, i, 3, 3],
            weight: Tensor::<f64>::uniform(&[o * i * 9], 0.5, rng).into_vec(),
            bias: vec![0.01; o],
            stride: 2,
            pad: 1,
            lin: (0..o).map(|k| 0.5 + k as f64 * 0.1).collect(),
        };
        let stages = vec![stage("s1", 4, 3, rng), stage("s2", 6, 4, rng)];
        ConvPlugin::new("toy", stages).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = image(&mut rng);
        let plugin = toy_plugin(&mut rng);
        assert_eq!(lpips(&x, &x, &IdentityPlugin).unwrap(), 0.0);
        assert_eq!(lpips(&x, &x, &plugin).unwrap(), 0.0);
    }

    #[test]
    fn identity_plugin_is_channel_normalized_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (image(&mut rng), image(&mut rng));
        let (sa, sb) = (a.map(|v| 2.0 * v - 1.0), b.map(|v| 2.0 * v - 1.0));
        let hw = 144;
        let mut sq = 0.0;
        for p in 0..hw {
            let na = (0..3).map(|k| sa.data()[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let nb = (0..3).map(|k| sb.data()[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            for k in 0..3 {
                sq += (sa.data()[k * hw + p] / na - sb.data()[k * hw + p] / nb).powi(2);
            }
        }
        let want = sq / (3 * hw) as f64;
        assert!((lpips(&a, &b, &IdentityPlugin).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn black_background_is_not_amplified() {
        let target = Tensor::<f64>::zeros(&[3, 8, 8]);
        let faint = target.map(|_| 0.01);
        assert!(lpips(&faint, &target, &IdentityPlugin).unwrap() < 1e-6);
    }

    #[test]
    fn grows_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = image(&mut rng);
        let noise = Tensor::<f64>::uniform(x.shape(), 1.0, &mut rng);
        let mut last = 0.0;
        for sigma in [0.01, 0.05, 0.1] {
            let y = x.zip_map(&noise, |a, n| a + sigma * n);
            let d = lpips(&x, &y, &IdentityPlugin).unwrap();
            assert!(d > last, "sigma {sigma}: {d} <= {last}");
            last = d;
        }
    }

    #[test]
    fn weight_file_round_trip_and_digest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plugin = toy_plugin(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        plugin.save(&path).unwrap();
        assert_eq!(ConvPlugin::load(&path).unwrap(), plugin);

        let mut tampered = plugin.clone();
        tampered.stages[0].bias[0] = 9.0;
        tampered.save(&path).unwrap();
        assert!(matches!(ConvPlugin::load(&path), Err(Error::Checksum { .. })));

        let missing = load_plugin(dir.path().join("nope.json").to_str().unwrap()).err().unwrap();
        assert!(matches!(missing, Error::Config(ref m) if m.contains("identity")));
    }
}
