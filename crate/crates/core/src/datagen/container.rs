//! Single-file cache of a generated test set.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MSPRDSET"
//! version    u32
//! seed       u64
//! n          u64      number of sequences
//! T          u32      frames per sequence
//! H, W       u32, u32 canvas
//! n_digits   u32
//! mid_h      u32
//! mid_w      u32
//! sigma      f64      heatmap spread in cells
//! then per sequence:
//!   labels   u8  [n_digits]
//!   frames   u8  [T * H * W]          gray plane, value = byte / 255
//!   centers  f64 [T * n_digits * 2]   (x, y) pixels
//!   mid      f32 [T * mid_h * mid_w]
//!   high     f32 [T * 2 * n_digits]
//! sha256     32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AnnotatedSequence, Canvas, DatasetSpec, TargetSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MSPRDSET";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 4 * 6 + 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContainerHeader {
    pub seed: u64,
    pub n: u64,
    pub steps: u32,
    pub height: u32,
    pub width: u32,
    pub n_digits: u32,
    pub mid_height: u32,
    pub mid_width: u32,
    pub sigma: f64,
}

impl ContainerHeader {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            n_sequences: self.n as usize,
            sequence_length: self.steps as usize,
            n_digits: self.n_digits as usize,
            canvas: Canvas { height: self.height as usize, width: self.width as usize },
            targets: TargetSpec { height: self.mid_height as usize, width: self.mid_width as usize, sigma: self.sigma },
        }
    }
}

/// Writes `sequences` and returns the hex sha256 of the whole file.
pub fn write_container(path: impl AsRef<Path>, spec: &DatasetSpec, sequences: &[AnnotatedSequence]) -> Result<String> {
    let path = path.as_ref();
    let (h, w) = (spec.canvas.height, spec.canvas.width);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&spec.seed.to_le_bytes());
    buf.extend_from_slice(&(sequences.len() as u64).to_le_bytes());
    for v in [spec.sequence_length, h, w, spec.n_digits, spec.targets.height, spec.targets.width] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&spec.targets.sigma.to_le_bytes());
    for seq in sequences {
        if seq.len() != spec.sequence_length || seq.labels.len() != spec.n_digits {
            return Err(Error::Argument("sequence does not match the dataset spec".into()));
        }
        buf.extend_from_slice(&seq.labels);
        for t in 0..seq.len() {
            let plane = &seq.frames.data()[t * 3 * h * w..t * 3 * h * w + h * w];
            buf.extend(plane.iter().map(|&v| (v * 255.0).round() as u8));
        }
        for c in seq.centers.iter().flatten().flatten() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for v in seq.mid_targets.data().iter().chain(seq.high_targets.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&buf)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        s
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }
    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(4 * n).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<(ContainerHeader, Vec<AnnotatedSequence>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN + 32 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a dataset container"));
    }
    let mut r = Reader { bytes: &bytes, at: 8 };
    let version = r.u32();
    if version != CONTAINER_VERSION {
        return Err(Error::Version { found: version, expected: CONTAINER_VERSION });
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Checksum { path: path.to_path_buf() });
    }
    let header = ContainerHeader {
        seed: r.u64(),
        n: r.u64(),
        steps: r.u32(),
        height: r.u32(),
        width: r.u32(),
        n_digits: r.u32(),
        mid_height: r.u32(),
        mid_width: r.u32(),
        sigma: r.f64(),
    };
    let (t, h, w, nd) = (header.steps as usize, header.height as usize, header.width as usize, header.n_digits as usize);
    let (mh, mw) = (header.mid_height as usize, header.mid_width as usize);
    let per_seq = nd + t * h * w + t * nd * 2 * 8 + 4 * (t * mh * mw + t * 2 * nd);
    if body.len() != HEADER_LEN + per_seq * header.n as usize {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let mut sequences = Vec::with_capacity(header.n as usize);
    for _ in 0..header.n {
        let labels = r.take(nd).to_vec();
        let mut frames = Vec::with_capacity(t * 3 * h * w);
        for _ in 0..t {
            let plane: Vec<f32> = r.take(h * w).iter().map(|&b| f32::from(b) / 255.0).collect();
            for _ in 0..3 {
                frames.extend_from_slice(&plane);
            }
        }
        let centers = (0..t).map(|_| (0..nd).map(|_| [r.f64(), r.f64()]).collect()).collect();
        let mid = r.f32s(t * mh * mw);
        let high = r.f32s(t * 2 * nd);
        sequences.push(AnnotatedSequence {
            frames: Tensor::from_vec(&[t, 3, h, w], frames)?,
            centers,
            mid_targets: Tensor::from_vec(&[t, 1, mh, mw], mid)?,
            high_targets: Tensor::from_vec(&[t, 2 * nd], high)?,
            labels,
        });
    }
    Ok((header, sequences))
}
