//! Dense single-image tensors and the three kernels the feature chain is built
//! from: 3×3 same-padded convolution, rectifier and 2×2 pooling, each with its
//! adjoint.
//!
//! Storage is `f32`. Convolution and inner products accumulate in `f64`, and
//! every output element of a forward op is produced by one fixed summation
//! order, so results do not depend on the number of worker threads.

use std::fmt;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar types a [`Tensor3`] can hold. The engine stores `f32`; `f64`
/// tensors run the same forward code at higher precision.
pub trait Real:
    Copy + Default + PartialOrd + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Activations of one layer, `channels × height × width`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "data length {} does not match shape {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::default(); channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Number of spatial positions per channel.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape<U: Real>(&self, other: &Tensor3<U>) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape<U: Real>(&self, other: &Tensor3<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Inner product with `f64` accumulation.
    pub fn dot(&self, other: &Tensor3<T>) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| v.to_f64() * v.to_f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor3<T>) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = T::from_f64(a.to_f64() + b.to_f64());
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v = T::from_f64(v.to_f64() * factor);
        }
    }
}

/// Parameters of one 3×3 convolution layer. Weights are `[out, in, 3, 3]`.
#[derive(Debug)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    // `f64` GEMM operands for the forward and adjoint maps, built on first use.
    forward_f64: OnceLock<Vec<f64>>,
    adjoint_f64: OnceLock<Vec<f64>>,
}

impl Clone for ConvKernel {
    fn clone(&self) -> Self {
        Self {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            forward_f64: OnceLock::new(),
            adjoint_f64: OnceLock::new(),
        }
    }
}

impl PartialEq for ConvKernel {
    fn eq(&self, other: &Self) -> bool {
        self.out_channels == other.out_channels
            && self.in_channels == other.in_channels
            && self.weights == other.weights
            && self.bias == other.bias
    }
}

impl ConvKernel {
    pub const SIZE: usize = 3;
    const TAPS: usize = 9;

    pub fn new(
        out_channels: usize,
        in_channels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if weights.len() != out_channels * in_channels * Self::TAPS {
            return Err(Error::dim(format!(
                "kernel weights length {} != {out_channels}x{in_channels}x3x3",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::dim(format!(
                "bias length {} != out channels {out_channels}",
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            weights,
            bias,
            forward_f64: OnceLock::new(),
            adjoint_f64: OnceLock::new(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    fn forward_weights(&self) -> &[f64] {
        self.forward_f64
            .get_or_init(|| self.weights.iter().map(|&v| v as f64).collect())
    }

    /// Kernel of the adjoint map: in/out swapped and taps rotated by 180°.
    fn adjoint_weights(&self) -> &[f64] {
        self.adjoint_f64.get_or_init(|| {
            let mut w = vec![0.0f64; self.weights.len()];
            for o in 0..self.out_channels {
                for i in 0..self.in_channels {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            w[((i * self.out_channels + o) * 3 + (2 - ky)) * 3 + (2 - kx)] =
                                self.weight(o, i, ky, kx) as f64;
                        }
                    }
                }
            }
            w
        })
    }
}

// Spatial positions handled per GEMM call. Fixed so that the partition (and
// therefore every accumulation) is independent of the thread pool size.
const CONV_TILE: usize = 1024;

/// Same-padded 3×3 convolution. `weights` is `out × (in·9)` row-major.
fn conv3x3<T: Real>(
    input: &Tensor3<T>,
    out_channels: usize,
    weights: &[f64],
    bias: Option<&[f32]>,
) -> Tensor3<T> {
    let (cin, h, w) = input.shape();
    let k = cin * ConvKernel::TAPS;
    let positions = h * w;
    let mut out = Tensor3::zeros(out_channels, h, w);
    if positions == 0 || out_channels == 0 {
        return out;
    }

    let tiles: Vec<(usize, Vec<T>)> = (0..positions)
        .step_by(CONV_TILE)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|p0| {
            let p1 = (p0 + CONV_TILE).min(positions);
            let n = p1 - p0;
            let mut cols = vec![0.0f64; k * n];
            for ci in 0..cin {
                let plane = input.plane(ci);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let row = &mut cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                        for (t, slot) in row.iter_mut().enumerate() {
                            let p = p0 + t;
                            let (y, x) = (p / w, p % w);
                            let sy = y as isize + ky as isize - 1;
                            let sx = x as isize + kx as isize - 1;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                *slot = plane[sy as usize * w + sx as usize].to_f64();
                            }
                        }
                    }
                }
            }
            let mut acc = vec![0.0f64; out_channels * n];
            // SAFETY: all slices are sized for the row-major m×k, k×n and m×n
            // operands described by the strides passed.
            unsafe {
                matrixmultiply::dgemm(
                    out_channels,
                    k,
                    n,
                    1.0,
                    weights.as_ptr(),
                    k as isize,
                    1,
                    cols.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    acc.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            let mut tile = vec![T::default(); out_channels * n];
            for o in 0..out_channels {
                let b = bias.map_or(0.0, |b| b[o] as f64);
                for t in 0..n {
                    tile[o * n + t] = T::from_f64(acc[o * n + t] + b);
                }
            }
            (p0, tile)
        })
        .collect();

    let data = out.as_mut_slice();
    for (p0, tile) in tiles {
        let n = tile.len() / out_channels;
        for o in 0..out_channels {
            data[o * positions + p0..o * positions + p0 + n]
                .copy_from_slice(&tile[o * n..(o + 1) * n]);
        }
    }
    out
}

/// 3×3 convolution, stride 1, zero padding 1; spatial size is preserved.
pub fn conv2d_forward<T: Real>(input: &Tensor3<T>, kernel: &ConvKernel) -> Result<Tensor3<T>> {
    if input.channels() != kernel.in_channels {
        return Err(Error::dim(format!(
            "conv input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels
        )));
    }
    Ok(conv3x3(
        input,
        kernel.out_channels,
        kernel.forward_weights(),
        Some(&kernel.bias),
    ))
}

/// Gradient with respect to the convolution input, given the gradient with
/// respect to its output. Bias does not enter.
pub fn conv2d_backward_input<T: Real>(
    grad_out: &Tensor3<T>,
    kernel: &ConvKernel,
) -> Result<Tensor3<T>> {
    if grad_out.channels() != kernel.out_channels {
        return Err(Error::dim(format!(
            "conv gradient has {} channels, kernel produces {}",
            grad_out.channels(),
            kernel.out_channels
        )));
    }
    Ok(conv3x3(
        grad_out,
        kernel.in_channels,
        kernel.adjoint_weights(),
        None,
    ))
}

pub fn relu_forward<T: Real>(input: &Tensor3<T>) -> Tensor3<T> {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place<T: Real>(t: &mut Tensor3<T>) {
    let zero = T::default();
    for v in t.as_mut_slice() {
        if *v < zero {
            *v = zero;
        }
    }
}

/// Passes the gradient where `input > 0`. The rectifier's output may be
/// supplied in place of its input: both are positive at the same positions.
pub fn relu_backward<T: Real>(grad_out: &Tensor3<T>, input: &Tensor3<T>) -> Result<Tensor3<T>> {
    grad_out.check_same_shape(input, "relu backward")?;
    let zero = T::default();
    let data = grad_out
        .as_slice()
        .iter()
        .zip(input.as_slice())
        .map(|(&g, &x)| if x > zero { g } else { zero })
        .collect();
    Tensor3::new(grad_out.channels, grad_out.height, grad_out.width, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    #[default]
    #[serde(alias = "avg")]
    Average,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "avg" | "average" => Ok(PoolMode::Average),
            other => Err(Error::Parameter(format!(
                "pooling mode must be `max` or `avg`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Average => "avg",
        })
    }
}

/// What a pooling forward call needs to remember for its adjoint.
#[derive(Clone, Debug)]
pub struct PoolRecord {
    mode: PoolMode,
    input_shape: (usize, usize, usize),
    /// Max mode: flat input index of each output's maximum.
    argmax: Vec<u32>,
}

impl PoolRecord {
    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        let (c, h, w) = self.input_shape;
        (c, h.div_ceil(2), w.div_ceil(2))
    }
}

/// 2×2, stride-2 pooling. Odd trailing rows/columns form truncated windows
/// that pool over their valid pixels only.
pub fn pool_forward<T: Real>(
    input: &Tensor3<T>,
    mode: PoolMode,
) -> Result<(Tensor3<T>, PoolRecord)> {
    let (c, h, w) = input.shape();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!("cannot pool empty tensor {c}x{h}x{w}")));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax.reserve(c * oh * ow);
    }
    for ch in 0..c {
        let plane = input.plane(ch);
        for oy in 0..oh {
            let (y0, y1) = (2 * oy, (2 * oy + 2).min(h));
            for ox in 0..ow {
                let (x0, x1) = (2 * ox, (2 * ox + 2).min(w));
                let value = match mode {
                    PoolMode::Max => {
                        let mut best = y0 * w + x0;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                if plane[y * w + x] > plane[best] {
                                    best = y * w + x;
                                }
                            }
                        }
                        argmax.push((ch * h * w + best) as u32);
                        plane[best]
                    }
                    PoolMode::Average => {
                        let mut sum = 0.0f64;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                sum += plane[y * w + x].to_f64();
                            }
                        }
                        T::from_f64(sum / ((y1 - y0) * (x1 - x0)) as f64)
                    }
                };
                *out.at_mut(ch, oy, ox) = value;
            }
        }
    }
    Ok((
        out,
        PoolRecord {
            mode,
            input_shape: (c, h, w),
            argmax,
        },
    ))
}

pub fn pool_backward<T: Real>(grad_out: &Tensor3<T>, record: &PoolRecord) -> Result<Tensor3<T>> {
    if grad_out.shape() != record.output_shape() {
        return Err(Error::dim(format!(
            "pool gradient shape {:?} does not match recorded output {:?}",
            grad_out.shape(),
            record.output_shape()
        )));
    }
    let (c, h, w) = record.input_shape;
    let (_, oh, ow) = record.output_shape();
    let mut grad_in = Tensor3::<T>::zeros(c, h, w);
    match record.mode {
        PoolMode::Max => {
            let data = grad_in.as_mut_slice();
            for (&idx, &g) in record.argmax.iter().zip(grad_out.as_slice()) {
                let slot = &mut data[idx as usize];
                *slot = T::from_f64(slot.to_f64() + g.to_f64());
            }
        }
        PoolMode::Average => {
            for ch in 0..c {
                for oy in 0..oh {
                    let (y0, y1) = (2 * oy, (2 * oy + 2).min(h));
                    for ox in 0..ow {
                        let (x0, x1) = (2 * ox, (2 * ox + 2).min(w));
                        let share =
                            grad_out.at(ch, oy, ox).to_f64() / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let slot = grad_in.at_mut(ch, y, x);
                                *slot = T::from_f64(slot.to_f64() + share);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> ConvKernel {
        let weights = (0..out * inp * 9)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvKernel::new(out, inp, weights, bias).unwrap()
    }

    // Direct six-nested-loop reference.
    fn conv_reference(input: &Tensor3, k: &ConvKernel) -> Tensor3 {
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

    fn max_rel(a: &Tensor3, b: &Tensor3) -> f32 {
        let scale = (a.max_abs().max(b.max_abs()) as f32).max(f32::MIN_POSITIVE);
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
            / scale
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let k = ConvKernel::new(1, 1, w, vec![0.0]).unwrap();
        let x = Tensor3::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32 - 7.5);
        assert_eq!(conv2d_forward(&x, &k).unwrap(), x);
        assert_eq!(conv2d_backward_input(&x, &k).unwrap(), x);
    }

    #[test]
    fn bias_only_on_zero_input() {
        let k = ConvKernel::new(2, 3, vec![0.7; 54], vec![1.5, -2.0]).unwrap();
        let out = conv2d_forward(&Tensor3::<f32>::zeros(3, 5, 4), &k).unwrap();
        assert!(out.plane(0).iter().all(|&v| v == 1.5));
        assert!(out.plane(1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv_matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 2, 5, 5);
        let k = random_kernel(&mut rng, 3, 2);
        assert!(max_rel(&conv2d_forward(&x, &k).unwrap(), &conv_reference(&x, &k)) < 1e-5);
    }

    #[test]
    fn conv_spans_multiple_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 2, 37, 41);
        let k = random_kernel(&mut rng, 4, 2);
        assert!(max_rel(&conv2d_forward(&x, &k).unwrap(), &conv_reference(&x, &k)) < 1e-5);
    }

    #[test]
    fn conv_channel_mismatch() {
        let k = ConvKernel::new(1, 2, vec![0.0; 18], vec![0.0]).unwrap();
        assert!(matches!(
            conv2d_forward(&Tensor3::<f32>::zeros(3, 2, 2), &k),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            conv2d_backward_input(&Tensor3::<f32>::zeros(2, 2, 2), &k),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_grad_gives_zero_input_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_kernel(&mut rng, 3, 2);
        let g = conv2d_backward_input(&Tensor3::<f32>::zeros(3, 4, 4), &k).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_signs() {
        let neg = Tensor3::new(1, 1, 3, vec![-1.0, -2.0, -0.5]).unwrap();
        assert!(relu_forward(&neg).as_slice().iter().all(|&v| v == 0.0));
        let ones = Tensor3::new(1, 1, 3, vec![1.0; 3]).unwrap();
        assert!(relu_backward(&ones, &neg)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        let pos = Tensor3::new(1, 1, 3, vec![1.0, 2.0, 0.5]).unwrap();
        assert_eq!(relu_forward(&pos), pos);
        assert_eq!(relu_backward(&pos, &pos).unwrap(), pos);
        assert!(relu_backward(&pos, &Tensor3::<f32>::zeros(1, 3, 1)).is_err());
    }

    #[test]
    fn pool_small_cases() {
        let c = Tensor3::new(1, 2, 2, vec![3.0; 4]).unwrap();
        for mode in [PoolMode::Max, PoolMode::Average] {
            assert_eq!(pool_forward(&c, mode).unwrap().0.as_slice(), &[3.0]);
        }
        let t = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            pool_forward(&t, PoolMode::Max).unwrap().0.as_slice(),
            &[4.0]
        );
        assert_eq!(
            pool_forward(&t, PoolMode::Average).unwrap().0.as_slice(),
            &[2.5]
        );
        assert!(pool_forward(&Tensor3::<f32>::zeros(1, 0, 3), PoolMode::Max).is_err());
    }

    #[test]
    fn pool_odd_dims_truncate() {
        let t = Tensor3::from_fn(1, 3, 3, |_, y, x| (y * 3 + x) as f32);
        let (avg, rec) = pool_forward(&t, PoolMode::Average).unwrap();
        assert_eq!(avg.shape(), (1, 2, 2));
        assert_eq!(avg.as_slice(), &[2.0, 3.5, 6.5, 8.0]);
        let g = pool_backward(&Tensor3::new(1, 2, 2, vec![1.0; 4]).unwrap(), &rec).unwrap();
        assert_eq!(
            g.as_slice(),
            &[0.25, 0.25, 0.5, 0.25, 0.25, 0.5, 0.5, 0.5, 1.0]
        );
        let (max, _) = pool_forward(&t, PoolMode::Max).unwrap();
        assert_eq!(max.as_slice(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn pool_backward_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 2, 4, 6);
        let (_, rec) = pool_forward(&x, PoolMode::Average).unwrap();
        let g = pool_backward(&Tensor3::new(2, 2, 3, vec![1.0; 12]).unwrap(), &rec).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.25));

        let (_, rec) = pool_forward(&x, PoolMode::Max).unwrap();
        let g = pool_backward(&Tensor3::new(2, 2, 3, vec![1.0; 12]).unwrap(), &rec).unwrap();
        for ch in 0..2 {
            for oy in 0..2 {
                for ox in 0..3 {
                    let nonzero = (0..2)
                        .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                        .filter(|&(dy, dx)| g.at(ch, 2 * oy + dy, 2 * ox + dx) != 0.0)
                        .count();
                    assert_eq!(nonzero, 1);
                }
            }
        }
        assert!(pool_backward(&Tensor3::<f32>::zeros(2, 3, 3), &rec).is_err());
    }
}
