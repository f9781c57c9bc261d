use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, DynamicImage, Frame, Rgb, RgbImage};
use mspred_core::datagen::AnnotatedSequence;
use mspred_core::model::MultiScalePrediction;
use mspred_core::training::{load_checkpoint, read_checkpoint_header};
use mspred_core::{Error, Result, Scalar, Tensor};

use crate::eval::load_sequences;
use crate::render::{blit_frame, cell_center, draw_cross, draw_number, heatmap_peak, overlay_heatmap, GREEN, RED, WHITE};
use crate::run::{load_config, RunDir};
use crate::ConfigArgs;

const SEED_COLUMNS: usize = 3;
const LABEL: u32 = 10;
const GAP: u32 = 2;

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoint to run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset container; defaults to the test set described by the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Sequence index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output directory; defaults to the run's `samples/`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn run(args: PredictArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let header = read_checkpoint_header(&args.checkpoint)?;
    let sequences = load_sequences(args.dataset.as_deref(), &cfg)?;
    let seq = sequences.get(args.index).ok_or_else(|| {
        Error::Argument(format!("--index {} out of range; dataset has {} sequences", args.index, sequences.len()))
    })?;
    let (pred, seed_frames) = match header.scalar_bytes {
        4 => infer::<f32>(&args.checkpoint, seq)?,
        _ => infer::<f64>(&args.checkpoint, seq)?,
    };
    let out = match &args.out {
        Some(o) => o.clone(),
        None => RunDir::of_checkpoint(&args.checkpoint).map(|d| d.samples()).unwrap_or_else(|| PathBuf::from("samples")),
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let grid = render_grid(seq, &pred, seed_frames);
    let png = out.join(format!("seq{:04}_grid.png", args.index));
    grid.save(&png).map_err(|e| Error::io(&png, std::io::Error::other(e)))?;
    let gif = out.join(format!("seq{:04}.gif", args.index));
    write_animation(&gif, seq, &pred, seed_frames)?;
    println!("wrote {} and {}", png.display(), gif.display());
    Ok(())
}

fn infer<S: Scalar>(path: &Path, seq: &AnnotatedSequence) -> Result<(MultiScalePrediction<f32>, usize)> {
    let (model, _, _) = load_checkpoint::<S>(path)?;
    let c = model.config().seed_frames;
    let inner = seq.frame(1).numel();
    let (h, w) = model.config().frame_size;
    if seq.len() < c || seq.frames.dim(2) != h || seq.frames.dim(3) != w {
        return Err(Error::Argument(format!(
            "sequence shape {:?} does not fit a model with {c} seed frames at {h}x{w}",
            seq.frames.shape()
        )));
    }
    let seed = Tensor::<f32>::from_vec(&[1, c, 3, h, w], seq.frames.data()[..c * inner].to_vec())?.cast::<S>();
    let (pred, _) = model.run_inference(&seed)?;
    let cast = |v: Vec<(usize, Tensor<S>)>| v.into_iter().map(|(t, x)| (t, x.index0(0).cast())).collect();
    Ok((MultiScalePrediction { frames: cast(pred.frames), mid: cast(pred.mid), high: cast(pred.high) }, c))
}

/// Rows: ground truth, predicted frames, mid heatmaps over the true frame,
/// predicted centers (red) against true centers (green). Every cell is
/// labelled with its timestep.
pub fn render_grid(seq: &AnnotatedSequence, pred: &MultiScalePrediction<f32>, seed_frames: usize) -> RgbImage {
    let (h, w) = (seq.frames.dim(2) as u32, seq.frames.dim(3) as u32);
    let cols = SEED_COLUMNS + pred.frames.len().max(pred.mid.len()).max(pred.high.len());
    let cell_h = LABEL + h + GAP;
    let mut img = RgbImage::from_pixel(cols as u32 * (w + GAP), 4 * cell_h, Rgb([32, 32, 32]));
    let origin = |row: u32, col: usize| (col as u32 * (w + GAP), row * cell_h + LABEL);
    let true_frame = |t: usize| (t <= seq.len()).then(|| seq.frame(t));

    let seed_steps = seed_frames.saturating_sub(SEED_COLUMNS - 1).max(1)..=seed_frames;
    for (col, t) in seed_steps.enumerate() {
        for row in 0..4 {
            let (x, y) = origin(row, col);
            blit_frame(&mut img, &seq.frame(t), x, y);
            draw_number(&mut img, t, x + 1, y - LABEL + 1, WHITE);
        }
    }
    for (k, (t, frame)) in pred.frames.iter().enumerate() {
        let col = SEED_COLUMNS + k;
        if let Some(gt) = true_frame(*t) {
            let (x, y) = origin(0, col);
            blit_frame(&mut img, &gt, x, y);
            draw_number(&mut img, *t, x + 1, y - LABEL + 1, WHITE);
        }
        let (x, y) = origin(1, col);
        blit_frame(&mut img, frame, x, y);
        draw_number(&mut img, *t, x + 1, y - LABEL + 1, WHITE);
    }
    for (k, (t, heat)) in pred.mid.iter().enumerate() {
        let (x, y) = origin(2, SEED_COLUMNS + k);
        let (hh, hw) = (heat.dim(1), heat.dim(2));
        if let Some(gt) = true_frame(*t) {
            blit_frame(&mut img, &gt, x, y);
        }
        overlay_heatmap(&mut img, heat.data(), hh, hw, x, y, h as usize, w as usize);
        let (py, px) = cell_center(heatmap_peak(heat.data(), hw), (hh, hw), (h as usize, w as usize));
        draw_cross(&mut img, px, py, (x, y, w, h), WHITE);
        draw_number(&mut img, *t, x + 1, y - LABEL + 1, RED);
    }
    for (k, (t, coords)) in pred.high.iter().enumerate() {
        let (x, y) = origin(3, SEED_COLUMNS + k);
        if let Some(gt) = true_frame(*t) {
            blit_frame(&mut img, &gt, x, y);
            for c in &seq.centers[*t - 1] {
                draw_cross(&mut img, c[0], c[1], (x, y, w, h), GREEN);
            }
        }
        for p in coords.data().chunks(2) {
            draw_cross(&mut img, p[0] as f64 * w as f64, p[1] as f64 * h as f64, (x, y, w, h), RED);
        }
        draw_number(&mut img, *t, x + 1, y - LABEL + 1, RED);
    }
    img
}

/// Ground truth (left) next to the model's view (right): seed frames, then predictions.
fn write_animation(path: &Path, seq: &AnnotatedSequence, pred: &MultiScalePrediction<f32>, seed_frames: usize) -> Result<()> {
    let (h, w) = (seq.frames.dim(2) as u32, seq.frames.dim(3) as u32);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GifEncoder::new_with_speed(BufWriter::new(file), 10);
    let gif_err = |e: image::ImageError| Error::io(path, std::io::Error::other(e));
    enc.set_repeat(Repeat::Infinite).map_err(gif_err)?;
    let seed = (1..=seed_frames).map(|t| (t, seq.frame(t)));
    let preds = pred.frames.iter().map(|(t, f)| (*t, f.clone()));
    for (t, right) in seed.chain(preds) {
        let mut img = RgbImage::from_pixel(2 * w + GAP, h + LABEL, Rgb([32, 32, 32]));
        if t <= seq.len() {
            blit_frame(&mut img, &seq.frame(t), 0, LABEL);
        }
        blit_frame(&mut img, &right, w + GAP, LABEL);
        draw_number(&mut img, t, 1, 1, if t > seed_frames { RED } else { WHITE });
        let rgba = DynamicImage::ImageRgb8(img).into_rgba8();
        enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(150, 1))).map_err(gif_err)?;
    }
    Ok(())
}
