//! Digit glyph sources: MNIST IDX files, or a procedural fallback.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const GLYPH_SIZE: usize = 28;
const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Grayscale 28x28 digit images with labels. Pixels are `byte / 255`.
#[derive(Clone, Debug)]
pub struct DigitGlyphSet {
    glyphs: Vec<u8>,
    labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            MnistSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            MnistSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

impl DigitGlyphSet {
    pub fn from_bytes(glyphs: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Argument("glyph set must contain at least one digit".into()));
        }
        if glyphs.len() != labels.len() * GLYPH_SIZE * GLYPH_SIZE {
            return Err(Error::Argument(format!(
                "{} glyph bytes do not match {} labels",
                glyphs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Argument(format!("label {bad} outside 0..=9")));
        }
        Ok(DigitGlyphSet { glyphs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// Raw bytes of glyph `i`, row-major.
    pub fn bytes(&self, i: usize) -> &[u8] {
        let n = GLYPH_SIZE * GLYPH_SIZE;
        &self.glyphs[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, i: usize, row: usize, col: usize) -> f32 {
        f32::from(self.bytes(i)[row * GLYPH_SIZE + col]) / 255.0
    }

    /// Procedurally drawn digits for environments without MNIST.
    ///
    /// Each glyph is a 5x7 bitmap digit, scaled, slanted and shifted with
    /// seeded jitter, then antialiased by 3x3 supersampling.
    pub fn synthetic(per_digit: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glyphs = Vec::with_capacity(per_digit * 10 * GLYPH_SIZE * GLYPH_SIZE);
        let mut labels = Vec::with_capacity(per_digit * 10);
        for _ in 0..per_digit {
            for digit in 0..10u8 {
                glyphs.extend(draw_digit(digit, &mut rng));
                labels.push(digit);
            }
        }
        DigitGlyphSet { glyphs, labels }
    }
}

const FONT: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// Whether the 5x7 bitmap of `digit` is set at integer cell `(col, row)`.
pub fn font_cell(digit: u8, col: isize, row: isize) -> bool {
    if !(0..5).contains(&col) || !(0..7).contains(&row) {
        return false;
    }
    FONT[digit as usize][row as usize].as_bytes()[col as usize] == b'1'
}

fn draw_digit(digit: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let scale: f64 = rng.gen_range(2.6..3.1);
    let slant: f64 = rng.gen_range(-0.2..0.2);
    let cx = 14.0 + rng.gen_range(-1.5..1.5);
    let cy = 14.0 + rng.gen_range(-1.5..1.5);
    let ink: f64 = rng.gen_range(0.85..1.0);
    let mut out = vec![0u8; GLYPH_SIZE * GLYPH_SIZE];
    for r in 0..GLYPH_SIZE {
        for c in 0..GLYPH_SIZE {
            let mut hits = 0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let py = r as f64 + (sy as f64 + 0.5) / 3.0;
                    let px = c as f64 + (sx as f64 + 0.5) / 3.0;
                    let fy = (py - cy) / scale + 3.5;
                    let fx = (px - cx) / scale + 2.5 + slant * (fy - 3.5);
                    if font_cell(digit, fx.floor() as isize, fy.floor() as isize) {
                        hits += 1;
                    }
                }
            }
            out[r * GLYPH_SIZE + c] = (ink * 255.0 * hits as f64 / 9.0).round() as u8;
        }
    }
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(path, "truncated IDX header"))
}

/// Reads an MNIST image/label file pair from `dir`.
pub fn load_digit_glyphs(dir: impl AsRef<Path>, split: MnistSplit) -> Result<DigitGlyphSet> {
    let dir = dir.as_ref();
    let (img_name, lbl_name) = split.file_names();
    let img_path: PathBuf = dir.join(img_name);
    let lbl_path: PathBuf = dir.join(lbl_name);

    let images = read_file(&img_path)?;
    let magic = be_u32(&images, 0, &img_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(&img_path, format!("magic number {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = be_u32(&images, 4, &img_path)? as usize;
    let rows = be_u32(&images, 8, &img_path)? as usize;
    let cols = be_u32(&images, 12, &img_path)? as usize;
    if rows != GLYPH_SIZE || cols != GLYPH_SIZE {
        return Err(Error::format(&img_path, format!("images are {rows}x{cols}, expected 28x28")));
    }
    let pixels = images
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::format(&img_path, format!("truncated: header promises {n} images")))?;

    let labels = read_file(&lbl_path)?;
    let magic = be_u32(&labels, 0, &lbl_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(&lbl_path, format!("magic number {magic}, expected {LABEL_MAGIC}")));
    }
    let nl = be_u32(&labels, 4, &lbl_path)? as usize;
    if nl != n {
        return Err(Error::format(&lbl_path, format!("{nl} labels for {n} images")));
    }
    let label_bytes = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::format(&lbl_path, format!("truncated: header promises {n} labels")))?;
    DigitGlyphSet::from_bytes(pixels.to_vec(), label_bytes.to_vec()).map_err(|e| Error::format(&lbl_path, e.to_string()))
}
