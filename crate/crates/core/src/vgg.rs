//! The convolutional feature chain of VGG-19 (`conv1_1` … `pool5`) with a
//! reverse pass that accumulates gradients injected at arbitrary layers back
//! onto the input image.
//!
//! Layer names refer to post-rectifier activations: `conv3_1` and `relu3_1`
//! name the same tensor.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward_input, conv2d_forward, pool_backward, pool_forward, relu_backward,
    relu_in_place, ConvKernel, PoolMode, PoolRecord, Real, Tensor3,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
    },
    Pool,
}

struct LayerSpec {
    name: &'static str,
    kind: LayerKind,
}

const fn conv(name: &'static str, in_channels: usize, out_channels: usize) -> LayerSpec {
    LayerSpec {
        name,
        kind: LayerKind::Conv {
            in_channels,
            out_channels,
        },
    }
}

const fn pool(name: &'static str) -> LayerSpec {
    LayerSpec {
        name,
        kind: LayerKind::Pool,
    }
}

// Swapping this table for the VGG-16 chain is the only change needed to
// target that network.
const ARCHITECTURE: [LayerSpec; 21] = [
    conv("conv1_1", 3, 64),
    conv("conv1_2", 64, 64),
    pool("pool1"),
    conv("conv2_1", 64, 128),
    conv("conv2_2", 128, 128),
    pool("pool2"),
    conv("conv3_1", 128, 256),
    conv("conv3_2", 256, 256),
    conv("conv3_3", 256, 256),
    conv("conv3_4", 256, 256),
    pool("pool3"),
    conv("conv4_1", 256, 512),
    conv("conv4_2", 512, 512),
    conv("conv4_3", 512, 512),
    conv("conv4_4", 512, 512),
    pool("pool4"),
    conv("conv5_1", 512, 512),
    conv("conv5_2", 512, 512),
    conv("conv5_3", 512, 512),
    conv("conv5_4", 512, 512),
    pool("pool5"),
];

pub const CONV_LAYER_COUNT: usize = 16;

/// A layer of the feature chain. Ordered by network depth.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerName(u8);

impl LayerName {
    pub fn all() -> impl Iterator<Item = LayerName> {
        (0..ARCHITECTURE.len() as u8).map(LayerName)
    }

    pub fn conv_layers() -> impl Iterator<Item = LayerName> {
        Self::all().filter(|l| l.is_conv())
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_str(self) -> &'static str {
        ARCHITECTURE[self.index()].name
    }

    pub fn kind(self) -> LayerKind {
        ARCHITECTURE[self.index()].kind
    }

    pub fn is_conv(self) -> bool {
        matches!(self.kind(), LayerKind::Conv { .. })
    }

    /// Cumulative downsampling factor at this layer: pools contribute their
    /// kernel size (2), convolutions contribute 1.
    pub fn feature_scale(self) -> u32 {
        let pools = ARCHITECTURE[..=self.index()]
            .iter()
            .filter(|l| l.kind == LayerKind::Pool)
            .count();
        1 << pools
    }

    /// Channel count of the activation at this layer.
    pub fn channels(self) -> usize {
        ARCHITECTURE[..=self.index()]
            .iter()
            .rev()
            .find_map(|l| match l.kind {
                LayerKind::Conv { out_channels, .. } => Some(out_channels),
                LayerKind::Pool => None,
            })
            .expect("chain starts with a convolution")
    }
}

pub fn feature_scale(layer: LayerName) -> u32 {
    layer.feature_scale()
}

impl fmt::Display for LayerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for LayerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let canonical = match s.strip_prefix("relu") {
            Some(rest) => format!("conv{rest}"),
            None => s.to_string(),
        };
        ARCHITECTURE
            .iter()
            .position(|l| l.name == canonical)
            .map(|i| LayerName(i as u8))
            .ok_or_else(|| Error::UnknownLayer(s.to_string()))
    }
}

impl Serialize for LayerName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for LayerName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

impl ChannelOrder {
    /// Index into an RGB pixel for tensor channel `c`.
    fn source_channel(self, c: usize) -> usize {
        match self {
            ChannelOrder::Rgb => c,
            ChannelOrder::Bgr => 2 - c,
        }
    }
}

/// Preprocessing metadata carried in the weight container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMeta {
    pub channel_order: ChannelOrder,
    /// Per tensor channel, in `channel_order`, on the 0..255 scale.
    pub mean: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling_hint: Option<PoolMode>,
}

impl Default for WeightMeta {
    /// ImageNet means in BGR order, as shipped with the original VGG release.
    fn default() -> Self {
        Self {
            channel_order: ChannelOrder::Bgr,
            mean: [103.939, 116.779, 123.68],
            pooling_hint: Some(PoolMode::Max),
        }
    }
}

pub const CONTAINER_MAGIC: &[u8; 4] = b"VGWT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    tensors: Vec<TensorEntry>,
    meta: WeightMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

/// Immutable parameters of the 16 convolution layers plus preprocessing
/// metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    kernels: Vec<ConvKernel>,
    meta: WeightMeta,
    version: u32,
}

fn conv_shapes() -> impl Iterator<Item = (LayerName, usize, usize)> {
    LayerName::conv_layers().map(|l| match l.kind() {
        LayerKind::Conv {
            in_channels,
            out_channels,
        } => (l, in_channels, out_channels),
        LayerKind::Pool => unreachable!(),
    })
}

impl WeightStore {
    pub fn from_kernels(kernels: Vec<ConvKernel>, meta: WeightMeta) -> Result<Self> {
        if kernels.len() != CONV_LAYER_COUNT {
            return Err(Error::Validation {
                name: "<store>".into(),
                reason: format!(
                    "expected {CONV_LAYER_COUNT} conv layers, got {}",
                    kernels.len()
                ),
            });
        }
        for ((layer, cin, cout), k) in conv_shapes().zip(&kernels) {
            if k.in_channels() != cin || k.out_channels() != cout {
                return Err(Error::Validation {
                    name: layer.to_string(),
                    reason: format!(
                        "expected {cout}x{cin} kernel, got {}x{}",
                        k.out_channels(),
                        k.in_channels()
                    ),
                });
            }
        }
        Ok(Self {
            kernels,
            meta,
            version: CONTAINER_VERSION,
        })
    }

    /// Seeded He-initialized weights with the real network's shapes, for
    /// tests and desk-scale experiments.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias_dist = Normal::new(0.0f32, 0.01).expect("valid std");
        let kernels = conv_shapes()
            .map(|(_, cin, cout)| {
                let std = (2.0 / (9 * cin) as f32).sqrt();
                let dist = Normal::new(0.0f32, std).expect("valid std");
                let weights = (0..cout * cin * 9).map(|_| dist.sample(&mut rng)).collect();
                let bias = (0..cout).map(|_| bias_dist.sample(&mut rng)).collect();
                ConvKernel::new(cout, cin, weights, bias).expect("shapes from table")
            })
            .collect();
        Self::from_kernels(kernels, WeightMeta::default()).expect("shapes from table")
    }

    pub fn meta(&self) -> &WeightMeta {
        &self.meta
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn kernel(&self, layer: LayerName) -> Option<&ConvKernel> {
        if !layer.is_conv() {
            return None;
        }
        let conv_index = LayerName::conv_layers().position(|l| l == layer)?;
        self.kernels.get(conv_index)
    }

    pub fn kernels(&self) -> impl Iterator<Item = (LayerName, &ConvKernel)> {
        LayerName::conv_layers().zip(&self.kernels)
    }

    /// Serializes to the `VGWT` container. Tensors are written in network
    /// order, weight then bias per layer.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(2 * CONV_LAYER_COUNT);
        for (layer, k) in self.kernels() {
            tensors.push(TensorEntry {
                name: format!("{layer}.weight"),
                shape: vec![k.out_channels(), k.in_channels(), 3, 3],
                dtype: "f32".into(),
            });
            tensors.push(TensorEntry {
                name: format!("{layer}.bias"),
                shape: vec![k.out_channels()],
                dtype: "f32".into(),
            });
        }
        let header = serde_json::to_vec(&ContainerHeader {
            tensors,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for k in &self.kernels {
            for v in k.weights().iter().chain(k.bias()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::Format("missing VGWT magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version} (expected {CONTAINER_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("header extends past end of file".into()))?;
        let header: ContainerHeader = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;

        let mut blobs: BTreeMap<String, (Vec<usize>, &[u8])> = BTreeMap::new();
        let mut offset = header_end;
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Validation {
                    name: entry.name.clone(),
                    reason: format!("unsupported dtype `{}`", entry.dtype),
                });
            }
            let n_bytes = entry.shape.iter().product::<usize>() * 4;
            let end = offset + n_bytes;
            if end > bytes.len() {
                return Err(Error::Validation {
                    name: entry.name.clone(),
                    reason: format!(
                        "truncated blob: needs {n_bytes} bytes, {} available",
                        bytes.len().saturating_sub(offset)
                    ),
                });
            }
            if blobs
                .insert(
                    entry.name.clone(),
                    (entry.shape.clone(), &bytes[offset..end]),
                )
                .is_some()
            {
                return Err(Error::Validation {
                    name: entry.name.clone(),
                    reason: "duplicate tensor".into(),
                });
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - offset
            )));
        }

        let mut take = |name: String, shape: Vec<usize>| -> Result<Vec<f32>> {
            let (found, blob) = blobs.remove(&name).ok_or_else(|| Error::Validation {
                name: name.clone(),
                reason: "missing tensor".into(),
            })?;
            if found != shape {
                return Err(Error::Validation {
                    name,
                    reason: format!("expected shape {shape:?}, found {found:?}"),
                });
            }
            Ok(blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let mut kernels = Vec::with_capacity(CONV_LAYER_COUNT);
        for (layer, cin, cout) in conv_shapes() {
            let weights = take(format!("{layer}.weight"), vec![cout, cin, 3, 3])?;
            let bias = take(format!("{layer}.bias"), vec![cout])?;
            kernels.push(ConvKernel::new(cout, cin, weights, bias)?);
        }
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::Validation {
                name: extra.clone(),
                reason: "not part of the VGG-19 feature chain".into(),
            });
        }
        let mut store = Self::from_kernels(kernels, header.meta)?;
        store.version = version;
        Ok(store)
    }
}

/// RGB image to a mean-subtracted tensor in the store's channel order.
pub fn preprocess(image: &RgbImage, meta: &WeightMeta) -> Result<Tensor3> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::dim(format!("cannot preprocess empty {w}x{h} image")));
    }
    Ok(Tensor3::from_fn(3, h as usize, w as usize, |c, y, x| {
        let src = meta.channel_order.source_channel(c);
        image.get_pixel(x as u32, y as u32).0[src] as f32 - meta.mean[c]
    }))
}

/// Inverse of [`preprocess`]: adds the means back, rounds and clamps to
/// `[0, 255]`.
pub fn deprocess(tensor: &Tensor3, meta: &WeightMeta) -> Result<RgbImage> {
    if tensor.channels() != 3 {
        return Err(Error::dim(format!(
            "image tensor must have 3 channels, got {}",
            tensor.channels()
        )));
    }
    let (_, h, w) = tensor.shape();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = tensor.at(c, y as usize, x as usize) + meta.mean[c];
            px.0[meta.channel_order.source_channel(c)] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(img)
}

/// Activations retained by a forward pass, one per layer up to the deepest
/// requested layer.
#[derive(Clone, Debug)]
pub struct ActivationCache<T = f32> {
    input_shape: (usize, usize, usize),
    activations: Vec<Tensor3<T>>,
    pool_records: Vec<Option<PoolRecord>>,
}

impl<T: Real> ActivationCache<T> {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn deepest(&self) -> Option<LayerName> {
        self.activations
            .len()
            .checked_sub(1)
            .map(|i| LayerName(i as u8))
    }

    pub fn activation(&self, layer: LayerName) -> Option<&Tensor3<T>> {
        self.activations.get(layer.index())
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerName, &Tensor3<T>)> {
        LayerName::all().zip(&self.activations)
    }

    /// Total scalars held.
    pub fn cached_values(&self) -> usize {
        self.activations.iter().map(Tensor3::len).sum()
    }
}

pub fn forward<T: Real>(
    input: &Tensor3<T>,
    store: &WeightStore,
    requested: &[LayerName],
    pooling: PoolMode,
) -> Result<ActivationCache<T>> {
    if input.channels() != 3 {
        return Err(Error::dim(format!(
            "network input must have 3 channels, got {}",
            input.channels()
        )));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(Error::dim("network input is empty"));
    }
    let depth = requested.iter().map(|l| l.index() + 1).max().unwrap_or(0);
    let mut activations: Vec<Tensor3<T>> = Vec::with_capacity(depth);
    let mut pool_records = Vec::with_capacity(depth);
    for layer in LayerName::all().take(depth) {
        let prev = activations.last().unwrap_or(input);
        let (out, record) = match layer.kind() {
            LayerKind::Conv { .. } => {
                let kernel = store.kernel(layer).expect("conv layer has kernel");
                let mut out = conv2d_forward(prev, kernel)?;
                relu_in_place(&mut out);
                (out, None)
            }
            LayerKind::Pool => {
                let (out, record) = pool_forward(prev, pooling)?;
                (out, Some(record))
            }
        };
        activations.push(out);
        pool_records.push(record);
    }
    Ok(ActivationCache {
        input_shape: input.shape(),
        activations,
        pool_records,
    })
}

/// Gradient with respect to the network input of `Σ ⟨g_l, f_l⟩`, where each
/// `g_l` is injected at layer `l`.
pub fn backward<T: Real>(
    cache: &ActivationCache<T>,
    store: &WeightStore,
    layer_grads: &BTreeMap<LayerName, Tensor3<T>>,
) -> Result<Tensor3<T>> {
    let (c, h, w) = cache.input_shape;
    let Some((&deepest, _)) = layer_grads.last_key_value() else {
        return Ok(Tensor3::zeros(c, h, w));
    };
    for (layer, grad) in layer_grads {
        let act = cache.activation(*layer).ok_or_else(|| {
            Error::dim(format!(
                "gradient injected at {layer}, which the forward pass did not reach"
            ))
        })?;
        grad.check_same_shape(act, &format!("gradient at {layer}"))?;
    }

    let mut running: Option<Tensor3<T>> = None;
    for index in (0..=deepest.index()).rev() {
        let layer = LayerName(index as u8);
        if let Some(injected) = layer_grads.get(&layer) {
            match running.as_mut() {
                Some(g) => g.add_assign(injected)?,
                None => running = Some(injected.clone()),
            }
        }
        let Some(grad) = running.take() else {
            continue;
        };
        running = Some(match layer.kind() {
            LayerKind::Conv { .. } => {
                let masked = relu_backward(&grad, &cache.activations[index])?;
                let kernel = store.kernel(layer).expect("conv layer has kernel");
                conv2d_backward_input(&masked, kernel)?
            }
            LayerKind::Pool => {
                let record = cache.pool_records[index]
                    .as_ref()
                    .expect("pool layers record their windows");
                pool_backward(&grad, record)?
            }
        });
    }
    Ok(running.unwrap_or_else(|| Tensor3::zeros(c, h, w)))
}
