//! Checkpoint container.
//!
//! ```text
//! magic       8 bytes "MSPRCKPT"
//! version     u32
//! dtype       u32     bytes per scalar (4 = f32, 8 = f64)
//! step        u64
//! digest      u32 length + UTF-8 run-config digest
//! meta        u32 length + JSON {model, seed, best_metric, adam, adam_t}
//! n_params    u32
//! per parameter, in model order:
//!   name      u32 length + UTF-8
//!   rank      u32, dims u64 * rank
//!   value, m, v   scalars, little-endian
//! sha256      32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, AdamConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MsPred};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MSPRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Bytes per stored scalar.
    pub scalar_bytes: u32,
    pub step: u64,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    seed: u64,
    best_metric: Option<f64>,
    adam: AdamConfig,
    adam_t: u64,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

pub fn save_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    model: &MsPred<S>,
    state: &TrainState<S>,
    config_digest: &str,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(S::BYTES as u32).to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    put_bytes(&mut buf, config_digest.as_bytes());
    let meta = Meta {
        model: model.config().clone(),
        seed: state.seed,
        best_metric: state.best_metric,
        adam: state.optimizer.config,
        adam_t: state.optimizer.t,
    };
    put_bytes(&mut buf, &serde_json::to_vec(&meta).expect("meta serializes"));
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (i, id) in params.ids().enumerate() {
        put_bytes(&mut buf, params.name(id).as_bytes());
        let value = params.get(id);
        buf.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for t in [value, &state.optimizer.m[i], &state.optimizer.v[i]] {
            for &x in t.data() {
                x.write_le(&mut buf);
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at + n).ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        let path = self.path;
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::format(path, "invalid UTF-8"))
    }
    fn tensor<S: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * S::BYTES)?;
        Tensor::from_vec(shape, raw.chunks_exact(S::BYTES).map(S::read_le).collect())
    }
}

/// Reads only the header fields.
pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = open(&bytes, path)?;
    let scalar_bytes = r.u32()?;
    let step = r.u64()?;
    Ok(CheckpointHeader { version: CHECKPOINT_VERSION, scalar_bytes, step, config_digest: r.string()? })
}

fn open<'a>(bytes: &'a [u8], path: &'a Path) -> Result<Reader<'a>> {
    if bytes.len() < 12 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint"));
    }
    let mut r = Reader { bytes, at: 8, path };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Checksum { path: path.to_path_buf() });
    }
    r.bytes = body;
    Ok(r)
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(MsPred<S>, TrainState<S>, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = open(&bytes, path)?;
    let width = r.u32()? as usize;
    if width != S::BYTES {
        return Err(Error::format(path, format!("checkpoint holds {width}-byte scalars, expected {}", S::BYTES)));
    }
    let step = r.u64()?;
    let config_digest = r.string()?;
    let meta: Meta =
        serde_json::from_slice(r.bytes()?).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
    let mut model = MsPred::<S>::new(meta.model, 0)?;
    let n = r.u32()? as usize;
    if n != model.params().len() {
        return Err(Error::format(path, format!("{n} parameters stored, model has {}", model.params().len())));
    }
    let mut optimizer = Adam::new(meta.adam, model.params())?;
    optimizer.t = meta.adam_t;
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model.params().find(&name).ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
        let value = r.tensor::<S>(&shape)?;
        model.params_mut().set(&name, value).map_err(|e| Error::format(path, e.to_string()))?;
        optimizer.m[id.0] = r.tensor(&shape)?;
        optimizer.v[id.0] = r.tensor(&shape)?;
    }
    if r.at != r.bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    let state = TrainState { step, seed: meta.seed, best_metric: meta.best_metric, optimizer };
    let header = CheckpointHeader { version: CHECKPOINT_VERSION, scalar_bytes: width as u32, step, config_digest };
    Ok((model, state, header))
}
