//! Raster helpers for prediction dumps.

use image::{Rgb, RgbImage};
use mspred_core::datagen::font_cell;
use mspred_core::Tensor;

pub const RED: Rgb<u8> = Rgb([230, 40, 40]);
pub const GREEN: Rgb<u8> = Rgb([40, 210, 80]);
pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Copies a `[3, H, W]` frame into `img` at `(x0, y0)`.
pub fn blit_frame(img: &mut RgbImage, frame: &Tensor<f32>, x0: u32, y0: u32) {
    let (h, w) = (frame.dim(1), frame.dim(2));
    let d = frame.data();
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| to_u8(d[(c * h + y) * w + x]);
            img.put_pixel(x0 + x as u32, y0 + y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
}

/// Blends a `[hh, hw]` heatmap over the `h x w` region at `(x0, y0)` in red.
pub fn overlay_heatmap(img: &mut RgbImage, heat: &[f32], hh: usize, hw: usize, x0: u32, y0: u32, h: usize, w: usize) {
    for y in 0..h {
        for x in 0..w {
            let a = heat[(y * hh / h) * hw + x * hw / w].clamp(0.0, 1.0) * 0.7;
            let p = img.get_pixel_mut(x0 + x as u32, y0 + y as u32);
            for (c, target) in p.0.iter_mut().zip(RED.0) {
                *c = ((1.0 - a) * *c as f32 + a * target as f32).round() as u8;
            }
        }
    }
}

/// Row-major argmax of a heatmap as `(row, col)`.
pub fn heatmap_peak(heat: &[f32], hw: usize) -> (usize, usize) {
    let i = heat
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0;
    (i / hw, i % hw)
}

/// Pixel `(y, x)` at the center of heatmap cell `(row, col)`.
pub fn cell_center(cell: (usize, usize), heat_size: (usize, usize), frame_size: (usize, usize)) -> (f64, f64) {
    let ch = frame_size.0 as f64 / heat_size.0 as f64;
    let cw = frame_size.1 as f64 / heat_size.1 as f64;
    ((cell.0 as f64 + 0.5) * ch, (cell.1 as f64 + 0.5) * cw)
}

/// A 5-pixel cross centered on `(x, y)`, clipped to the region.
pub fn draw_cross(img: &mut RgbImage, x: f64, y: f64, region: (u32, u32, u32, u32), color: Rgb<u8>) {
    let (rx, ry, rw, rh) = region;
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    for d in -2i64..=2 {
        for (px, py) in [(cx + d, cy), (cx, cy + d)] {
            if (0..rw as i64).contains(&px) && (0..rh as i64).contains(&py) {
                img.put_pixel(rx + px as u32, ry + py as u32, color);
            }
        }
    }
}

/// Writes `n` with the 5x7 digit font at `(x, y)`.
pub fn draw_number(img: &mut RgbImage, n: usize, x: u32, y: u32, color: Rgb<u8>) {
    for (k, ch) in n.to_string().bytes().enumerate() {
        let digit = ch - b'0';
        for row in 0..7 {
            for col in 0..5 {
                let (px, py) = (x + 6 * k as u32 + col, y + row);
                if font_cell(digit, col as isize, row as isize) && px < img.width() && py < img.height() {
                    img.put_pixel(px, py, color);
                }
            }
        }
    }
}
