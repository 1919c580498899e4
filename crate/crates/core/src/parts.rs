//! Part-based synthesis support: cropping matched content/style regions and
//! feathered recomposition of the synthesized parts over a base image.
//!
//! Blend weights are small integers per part, normalized by their sum at each
//! pixel, so the weights of the parts covering a pixel form an exact partition
//! of unity.

use std::fs;
use std::path::Path;

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for Rect {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Rect { x, y, w, h }
    }
}

impl From<Rect> for [u32; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).is_some_and(|r| r <= width)
            && self.y.checked_add(self.h).is_some_and(|b| b <= height)
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x0 < x1 && y0 < y1).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub name: String,
    pub content_rect: Rect,
    pub style_rect: Rect,
    pub overlap_margin: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feather {
    #[default]
    Linear,
    RaisedCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartManifest {
    /// `[width, height]` of the content image.
    pub canvas: [u32; 2],
    pub parts: Vec<Part>,
    #[serde(default, skip_serializing_if = "is_linear")]
    pub feather: Feather,
}

fn is_linear(f: &Feather) -> bool {
    *f == Feather::Linear
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartSide {
    Content,
    Style,
}

impl PartManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: PartManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let [cw, ch] = self.canvas;
        if cw == 0 || ch == 0 {
            return Err(Error::Manifest("canvas must be non-empty".into()));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if !p.content_rect.fits_in(cw, ch) {
                return Err(Error::Manifest(format!(
                    "part `{}`: content_rect {:?} lies outside the {cw}x{ch} canvas",
                    p.name,
                    <[u32; 4]>::from(p.content_rect)
                )));
            }
            if p.style_rect.w == 0 || p.style_rect.h == 0 {
                return Err(Error::Manifest(format!(
                    "part `{}`: empty style_rect",
                    p.name
                )));
            }
            for q in &self.parts[..i] {
                if q.name == p.name {
                    return Err(Error::Manifest(format!("duplicate part name `{}`", p.name)));
                }
                if let Some(shared) = p.content_rect.intersection(&q.content_rect) {
                    let needed = p.overlap_margin.min(q.overlap_margin);
                    if shared.w.min(shared.h) < needed {
                        return Err(Error::Manifest(format!(
                            "parts `{}` and `{}` overlap by {} px, less than their margin {needed}",
                            q.name,
                            p.name,
                            shared.w.min(shared.h)
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Integer blend weights of every part covering `(x, y)` and their sum.
    pub fn pixel_weights(&self, x: u32, y: u32) -> (Vec<(usize, u64)>, u64) {
        let [cw, ch] = self.canvas;
        let mut weights = Vec::new();
        let mut total = 0;
        for (i, p) in self.parts.iter().enumerate() {
            let r = &p.content_rect;
            if !r.contains(x, y) {
                continue;
            }
            // Distances (1-based) to the edges that are interior to the canvas.
            let mut d = u32::MAX;
            if r.x > 0 {
                d = d.min(x - r.x + 1);
            }
            if r.right() < cw {
                d = d.min(r.right() - x);
            }
            if r.y > 0 {
                d = d.min(y - r.y + 1);
            }
            if r.bottom() < ch {
                d = d.min(r.bottom() - y);
            }
            let margin = p.overlap_margin.max(1);
            let w = feather_weight(self.feather, d.min(margin), margin);
            weights.push((i, w));
            total += w;
        }
        (weights, total)
    }
}

// Linear weights are the clamped edge distance itself; the raised-cosine
// profile is quantized to integers so that normalization stays exact.
fn feather_weight(feather: Feather, d: u32, margin: u32) -> u64 {
    match feather {
        Feather::Linear => d as u64,
        Feather::RaisedCosine => {
            const LEVELS: f64 = 65536.0;
            let t = d as f64 / (margin as f64 + 1.0);
            let t = if d >= margin { 1.0 } else { t };
            ((LEVELS * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())).round() as u64).max(1)
        }
    }
}

/// Crops every part's content or style rectangle.
pub fn split_parts(
    image: &RgbImage,
    manifest: &PartManifest,
    side: PartSide,
) -> Result<Vec<RgbImage>> {
    let (w, h) = image.dimensions();
    if side == PartSide::Content && [w, h] != manifest.canvas {
        return Err(Error::Manifest(format!(
            "content image is {w}x{h} but the manifest canvas is {}x{}",
            manifest.canvas[0], manifest.canvas[1]
        )));
    }
    manifest
        .parts
        .iter()
        .map(|p| {
            let r = match side {
                PartSide::Content => p.content_rect,
                PartSide::Style => p.style_rect,
            };
            if !r.fits_in(w, h) {
                return Err(Error::Manifest(format!(
                    "part `{}`: rect {:?} lies outside the {w}x{h} image",
                    p.name,
                    <[u32; 4]>::from(r)
                )));
            }
            Ok(imageops::crop_imm(image, r.x, r.y, r.w, r.h).to_image())
        })
        .collect()
}

/// Overlays synthesized parts on `base`, feathering where parts overlap.
/// `parts[i]` must correspond to `manifest.parts[i]`.
pub fn merge_parts(
    parts: &[(RgbImage, Rect)],
    manifest: &PartManifest,
    base: &RgbImage,
) -> Result<RgbImage> {
    if parts.len() != manifest.parts.len() {
        return Err(Error::Manifest(format!(
            "{} part images given for {} manifest parts",
            parts.len(),
            manifest.parts.len()
        )));
    }
    if base.dimensions() != (manifest.canvas[0], manifest.canvas[1]) {
        return Err(Error::Manifest(
            "base image does not match the manifest canvas".into(),
        ));
    }
    for ((img, rect), p) in parts.iter().zip(&manifest.parts) {
        if *rect != p.content_rect {
            return Err(Error::Manifest(format!(
                "part `{}` placed at {:?}, manifest says {:?}",
                p.name,
                <[u32; 4]>::from(*rect),
                <[u32; 4]>::from(p.content_rect)
            )));
        }
        if img.dimensions() != (rect.w, rect.h) {
            return Err(Error::Manifest(format!(
                "part `{}` image is {}x{}, rect is {}x{}",
                p.name,
                img.width(),
                img.height(),
                rect.w,
                rect.h
            )));
        }
    }
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (weights, total) = manifest.pixel_weights(x, y);
        if weights.is_empty() {
            continue;
        }
        let mut acc = [0.0f64; 3];
        for (i, w) in weights {
            let (img, rect) = &parts[i];
            let v = img.get_pixel(x - rect.x, y - rect.y).0;
            for c in 0..3 {
                acc[c] += w as f64 * v[c] as f64;
            }
        }
        *px = Rgb(acc.map(|a| (a / total as f64).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(name: &str, rect: Rect, margin: u32) -> Part {
        Part {
            name: name.into(),
            content_rect: rect,
            style_rect: rect,
            overlap_margin: margin,
        }
    }

    #[test]
    fn manifest_json_shape() {
        let json = r#"{"canvas":[100,80],"parts":[{"name":"head","content_rect":[0,0,60,80],"style_rect":[10,5,60,70],"overlap_margin":16}]}"#;
        let m: PartManifest = serde_json::from_str(json).unwrap();
        assert_eq!(m.parts[0].style_rect, Rect::new(10, 5, 60, 70));
        assert_eq!(serde_json::to_string(&m).unwrap(), json);
        m.validate().unwrap();
    }

    #[test]
    fn rejects_out_of_bounds_and_thin_overlap() {
        let mut m = PartManifest {
            canvas: [50, 50],
            parts: vec![part("a", Rect::new(10, 10, 45, 10), 4)],
            feather: Feather::Linear,
        };
        assert!(matches!(m.validate(), Err(Error::Manifest(msg)) if msg.contains("`a`")));
        m.parts = vec![
            part("a", Rect::new(0, 0, 30, 50), 8),
            part("b", Rect::new(26, 0, 24, 50), 8),
        ];
        assert!(m.validate().is_err());
        m.parts[1] = part("b", Rect::new(22, 0, 28, 50), 8);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn single_part_pastes_directly() {
        let m = PartManifest {
            canvas: [20, 20],
            parts: vec![part("p", Rect::new(5, 5, 8, 8), 4)],
            feather: Feather::Linear,
        };
        let base = RgbImage::from_pixel(20, 20, Rgb([1, 2, 3]));
        let patch = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8 * 20, y as u8 * 20, 200]));
        let out = merge_parts(&[(patch.clone(), m.parts[0].content_rect)], &m, &base).unwrap();
        for (x, y, px) in out.enumerate_pixels() {
            let expected = if m.parts[0].content_rect.contains(x, y) {
                *patch.get_pixel(x - 5, y - 5)
            } else {
                Rgb([1, 2, 3])
            };
            assert_eq!(*px, expected);
        }
    }

    #[test]
    fn merge_rejects_inconsistent_parts() {
        let m = PartManifest {
            canvas: [20, 20],
            parts: vec![part("p", Rect::new(0, 0, 8, 8), 4)],
            feather: Feather::Linear,
        };
        let base = RgbImage::new(20, 20);
        assert!(merge_parts(&[(RgbImage::new(8, 8), Rect::new(1, 0, 8, 8))], &m, &base).is_err());
        assert!(merge_parts(&[(RgbImage::new(7, 8), Rect::new(0, 0, 8, 8))], &m, &base).is_err());
        assert!(merge_parts(&[], &m, &base).is_err());
    }

    #[test]
    fn raised_cosine_still_partitions_unity() {
        let m = PartManifest {
            canvas: [40, 10],
            parts: vec![
                part("a", Rect::new(0, 0, 25, 10), 10),
                part("b", Rect::new(15, 0, 25, 10), 10),
            ],
            feather: Feather::RaisedCosine,
        };
        for x in 0..40 {
            let (w, total) = m.pixel_weights(x, 5);
            assert_eq!(w.iter().map(|(_, v)| v).sum::<u64>(), total);
            assert!(total > 0);
        }
    }
}
