use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..WINDOW).map(|k| g[k] * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over every plane (all leading axes) and every valid window,
/// for images in `[0, 1]`.
pub fn ssim<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    super::check_pair(pred, target)?;
    let s = pred.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("ssim needs at least [H, W], got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < WINDOW || w < WINDOW {
        return Err(Error::Shape(format!("image {h}x{w} is smaller than the {WINDOW}x{WINDOW} SSIM window")));
    }
    let (c1, c2) = ((K1 * 1.0f64).powi(2), (K2 * 1.0f64).powi(2));
    let g = gaussian_taps();
    let planes = pred.numel() / (h * w);
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let x: Vec<f64> = pred.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = target.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter(&x, h, w, &g);
        let my = filter(&y, h, w, &g);
        let sxx = filter(&prod(&x, &x), h, w, &g);
        let syy = filter(&prod(&y, &y), h, w, &g);
        let sxy = filter(&prod(&x, &y), h, w, &g);
        for i in 0..mx.len() {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}
