//! Image resampling: bicubic resizing between scales and bilinear rotation
//! for input alignment.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Dimensions of `(width, height)` scaled so that the longer edge is `long_edge`.
pub fn scaled_dims(width: u32, height: u32, long_edge: u32) -> (u32, u32) {
    let long = width.max(height).max(1) as f64;
    let f = long_edge as f64 / long;
    let scale = |v: u32| ((v as f64 * f).round() as u32).max(1);
    if width >= height {
        (long_edge, scale(height))
    } else {
        (scale(width), long_edge)
    }
}

/// Bicubic (Catmull-Rom) resize; returns a copy when the size already matches.
pub fn resize(image: &RgbImage, width: u32, height: u32) -> RgbImage {
    if image.dimensions() == (width, height) {
        return image.clone();
    }
    imageops::resize(image, width, height, FilterType::CatmullRom)
}

pub fn resize_long_edge(image: &RgbImage, long_edge: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let (nw, nh) = scaled_dims(w, h, long_edge);
    resize(image, nw, nh)
}

pub fn long_edge(image: &RgbImage) -> u32 {
    let (w, h) = image.dimensions();
    w.max(h)
}

/// Rotates by `rotation_deg` (counter-clockwise as displayed) and scales
/// uniformly by `scale` about the image center. The canvas size is kept;
/// samples falling outside the source replicate its edge.
pub fn align_content(image: &RgbImage, rotation_deg: f64, scale: f64) -> Result<RgbImage> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Parameter(format!(
            "alignment scale must be positive, got {scale}"
        )));
    }
    if !rotation_deg.is_finite() {
        return Err(Error::Parameter("alignment rotation must be finite".into()));
    }
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Ok(image.clone());
    }
    let (cos, sin) = quarter_exact_cos_sin(rotation_deg);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = cx + (dx * cos - dy * sin) / scale;
        let sy = cy + (dx * sin + dy * cos) / scale;
        bilinear(image, sx, sy)
    }))
}

/// Undoes [`align_content`] with the same parameters (up to resampling).
pub fn unalign_content(image: &RgbImage, rotation_deg: f64, scale: f64) -> Result<RgbImage> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Parameter(format!(
            "alignment scale must be positive, got {scale}"
        )));
    }
    align_content(image, -rotation_deg, 1.0 / scale)
}

fn quarter_exact_cos_sin(deg: f64) -> (f64, f64) {
    let turns = deg / 90.0;
    if turns == turns.round() {
        match (turns.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

fn bilinear(image: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = image.dimensions();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx, yy| image.get_pixel(xx, yy).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0u8; 3];
    for i in 0..3 {
        let top = a[i] as f64 * (1.0 - fx) + b[i] as f64 * fx;
        let bottom = c[i] as f64 * (1.0 - fx) + d[i] as f64 * fx;
        out[i] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}
