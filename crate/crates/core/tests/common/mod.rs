//! Test-only oracles: brute-force kernels and central differences that share
//! no code with the engine's backward passes.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylize_core::{ConvKernel, Tensor3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f32) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-scale..scale))
}

pub fn random_kernel(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> ConvKernel {
    let weights = (0..out * inp * 9)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let bias = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
    ConvKernel::new(out, inp, weights, bias).unwrap()
}

/// Six nested loops, zero padding 1.
pub fn conv_reference(input: &Tensor3, k: &ConvKernel) -> Tensor3 {
    let (cin, h, w) = input.shape();
    Tensor3::from_fn(k.out_channels(), h, w, |o, y, x| {
        let mut acc = k.bias()[o] as f64;
        for i in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    let sx = x as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    acc += k.weight(o, i, ky, kx) as f64
                        * input.at(i, sy as usize, sx as usize) as f64;
                }
            }
        }
        acc as f32
    })
}

/// Window scan over 2×2 blocks truncated at the border.
pub fn pool_reference(input: &Tensor3, max: bool) -> Tensor3 {
    let (c, h, w) = input.shape();
    Tensor3::from_fn(c, h.div_ceil(2), w.div_ceil(2), |ch, oy, ox| {
        let mut vals = Vec::new();
        for y in 2 * oy..(2 * oy + 2).min(h) {
            for x in 2 * ox..(2 * ox + 2).min(w) {
                vals.push(input.at(ch, y, x));
            }
        }
        if max {
            vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
        } else {
            (vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64) as f32
        }
    })
}

pub fn relu_reference(input: &Tensor3) -> Tensor3 {
    let (c, h, w) = input.shape();
    Tensor3::from_fn(c, h, w, |ch, y, x| input.at(ch, y, x).max(0.0))
}

pub fn max_rel_diff(a: &Tensor3, b: &Tensor3) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE);
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()))
        / scale
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Central difference along one coordinate of an `f64` copy of the point.
pub fn central_diff(
    x: &Tensor3<f64>,
    i: usize,
    h: f64,
    mut f: impl FnMut(&Tensor3<f64>) -> f64,
) -> f64 {
    let mut p = x.clone();
    let base = x.as_slice()[i];
    p.as_mut_slice()[i] = base + h;
    let fu = f(&p);
    p.as_mut_slice()[i] = base - h;
    let fd = f(&p);
    (fu - fd) / (2.0 * h)
}

pub fn dot(a: &Tensor3, b: &Tensor3) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}

pub fn psnr(a: &image::RgbImage, b: &image::RgbImage, inset: u32) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    let (w, h) = a.dimensions();
    let mut se = 0.0;
    let mut n = 0.0;
    for y in inset..h - inset {
        for x in inset..w - inset {
            for c in 0..3 {
                let d = a.get_pixel(x, y).0[c] as f64 - b.get_pixel(x, y).0[c] as f64;
                se += d * d;
                n += 1.0;
            }
        }
    }
    let mse = se / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

/// Seeded test picture: diagonal color stripes over a soft gradient, plus
/// noise.
pub fn pattern_image(w: u32, h: u32, seed: u64) -> image::RgbImage {
    let mut r = rng(seed);
    let phase: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let period: f32 = r.random_range(5.0..9.0);
    image::RgbImage::from_fn(w, h, |x, y| {
        let t = ((x as f32 + 0.5 * y as f32) / period + phase).sin();
        let g = y as f32 / h.max(1) as f32;
        let mut n = || r.random_range(-12.0f32..12.0);
        image::Rgb([
            (128.0 + 90.0 * t + n()).clamp(0.0, 255.0) as u8,
            (60.0 + 120.0 * g + n()).clamp(0.0, 255.0) as u8,
            (180.0 - 70.0 * t * g + n()).clamp(0.0, 255.0) as u8,
        ])
    })
}
