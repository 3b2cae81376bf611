//! Minimal raster output: line charts and colour maps written as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Distinct line colours, cycled by series index.
pub const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    /// `(x, y)` pairs; non-finite points break the line.
    pub points: Vec<(f64, f64)>,
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Renders every series on shared axes (no text; colours follow [`PALETTE`] order).
pub fn line_chart(series: &[Series], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 24i64;
    let finite = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let (w, h) = (width as i64, height as i64);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (margin, h - margin), (w - margin, h - margin), axis);
    draw_line(&mut img, (margin, margin), (margin, h - margin), axis);
    if !x_lo.is_finite() {
        return img;
    }
    if x_hi - x_lo < 1e-12 {
        x_hi = x_lo + 1.0;
    }
    if y_hi - y_lo < 1e-12 {
        y_hi = y_lo + 1.0;
    }
    let to_px = |(x, y): (f64, f64)| {
        let px = margin as f64 + (x - x_lo) / (x_hi - x_lo) * (w - 2 * margin) as f64;
        let py = (h - margin) as f64 - (y - y_lo) / (y_hi - y_lo) * (h - 2 * margin) as f64;
        (px.round() as i64, py.round() as i64)
    };
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let mut prev: Option<(i64, i64)> = None;
        for &p in &s.points {
            if !(p.0.is_finite() && p.1.is_finite()) {
                prev = None;
                continue;
            }
            let q = to_px(p);
            match prev {
                Some(a) => draw_line(&mut img, a, q, c),
                None => draw_line(&mut img, q, q, c),
            }
            prev = Some(q);
        }
    }
    img
}

/// Diverging map for values in [-1, 1]: blue, white, red.
pub fn diverging(v: f32) -> Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let fade = |t: f32| (255.0 * (1.0 - t)).round() as u8;
    if v >= 0.0 {
        Rgb([255, fade(v), fade(v)])
    } else {
        Rgb([fade(-v), fade(-v), 255])
    }
}

/// Colour of an RGB sample in [0, 1].
pub fn rgb(r: f32, g: f32, b: f32) -> Rgb<u8> {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([q(r), q(g), q(b)])
}

/// Blends toward mid grey, used to mark masked token footprints.
pub fn dim(c: Rgb<u8>) -> Rgb<u8> {
    Rgb(c.0.map(|v| ((v as u16 + 3 * 96) / 4) as u8))
}
