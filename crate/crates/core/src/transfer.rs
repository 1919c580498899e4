//! End-to-end procedures: configuration presets, single-scale synthesis,
//! texture synthesis and the coarse-to-fine super-resolution loop.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, ContentTarget, LossConfig, StyleNormalization, StyleTarget};
use crate::optimizer::{
    clamp_flat, clamp_to_range, minimize_with, Evaluation, Observer, OptTrace, OptimizerSettings,
    TraceEntry,
};
use crate::resample::{align_content, long_edge, resize, resize_long_edge, scaled_dims};
use crate::tensor::{PoolMode, Tensor3};
use crate::vgg::{deprocess, preprocess, LayerName, WeightStore};

/// Standard deviation of the random initialization, in 8-bit pixel units.
pub const RANDOM_INIT_STD: f32 = 50.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Random,
    #[default]
    Content,
}

/// Rotation (degrees, counter-clockwise) and uniform scale applied to the
/// content image before synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub rotation_deg: f64,
    pub scale: f64,
}

impl Default for Alignment {
    fn default() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub loss: LossConfig,
    pub init: InitMode,
    /// `None`: inputs used as given. `Some`: content is aligned first.
    pub align: Option<Alignment>,
    #[serde(default)]
    pub pooling: PoolMode,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    /// Long-edge size both inputs are resized to before synthesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<u32>,
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        if let Some(a) = &self.align {
            if !(a.scale > 0.0 && a.scale.is_finite() && a.rotation_deg.is_finite()) {
                return Err(Error::Parameter(format!("invalid alignment {a:?}")));
            }
        }
        if self.output_size == Some(0) {
            return Err(Error::Parameter("output size must be positive".into()));
        }
        Ok(())
    }
}

/// The eight configurations compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
    VIII,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::I,
        Preset::II,
        Preset::III,
        Preset::IV,
        Preset::V,
        Preset::VI,
        Preset::VII,
        Preset::VIII,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::I => "I",
            Preset::II => "II",
            Preset::III => "III",
            Preset::IV => "IV",
            Preset::V => "V",
            Preset::VI => "VI",
            Preset::VII => "VII",
            Preset::VIII => "VIII",
        }
    }

    pub fn config(self) -> TransferConfig {
        use Preset::*;
        let (style, content, lambda, init, aligned) = match self {
            I => (LayerSet::Style, "conv4_2", 20.0, InitMode::Random, false),
            II => (LayerSet::Texture, "conv4_2", 20.0, InitMode::Random, false),
            III => (LayerSet::Texture, "conv4_2", 20.0, InitMode::Random, true),
            IV => (
                LayerSet::TextureConv5,
                "conv5_2",
                200.0,
                InitMode::Content,
                false,
            ),
            V => (
                LayerSet::TextureConv5,
                "conv5_2",
                200.0,
                InitMode::Content,
                true,
            ),
            VI => (LayerSet::Texture, "conv4_2", 20.0, InitMode::Content, true),
            VII => (
                LayerSet::TextureConv5,
                "conv4_2",
                20.0,
                InitMode::Content,
                true,
            ),
            VIII => (
                LayerSet::TextureConv5,
                "conv4_2",
                200.0,
                InitMode::Content,
                true,
            ),
        };
        TransferConfig {
            loss: LossConfig {
                content_layers: vec![content.parse().expect("known layer")],
                style_layers: style.layers(),
                style_weights: None,
                lambda,
                normalization: StyleNormalization::Size,
            },
            init,
            align: aligned.then(Alignment::default),
            pooling: PoolMode::Average,
            optimizer: OptimizerSettings::default(),
            output_size: None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

pub fn preset(name: &str) -> Result<TransferConfig> {
    Ok(name.parse::<Preset>()?.config())
}

/// Named style layer sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSet {
    /// `conv1_1, conv2_1, conv3_1, conv4_1, conv5_1`
    Style,
    /// `conv1_1, pool1, conv2_1, pool2, conv3_1, pool3, conv4_1, pool4`
    Texture,
    /// The texture set plus `conv5_1`.
    TextureConv5,
}

impl LayerSet {
    pub fn layers(self) -> Vec<LayerName> {
        let names: &[&str] = match self {
            LayerSet::Style => &["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"],
            LayerSet::Texture => &[
                "conv1_1", "pool1", "conv2_1", "pool2", "conv3_1", "pool3", "conv4_1", "pool4",
            ],
            LayerSet::TextureConv5 => &[
                "conv1_1", "pool1", "conv2_1", "pool2", "conv3_1", "pool3", "conv4_1", "pool4",
                "conv5_1",
            ],
        };
        names
            .iter()
            .map(|n| n.parse().expect("known layer"))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub image: RgbImage,
    pub trace: OptTrace,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_style_loss: f64,
}

fn tensor_to_flat(t: &Tensor3) -> Vec<f64> {
    t.as_slice().iter().map(|&v| v as f64).collect()
}

fn flat_to_tensor(values: &[f64], shape: (usize, usize, usize)) -> Tensor3 {
    let (c, h, w) = shape;
    Tensor3::new(c, h, w, values.iter().map(|&v| v as f32).collect()).expect("shape preserved")
}

/// Seeded Gaussian noise around the channel means, clamped to the pixel range.
pub fn random_init(width: u32, height: u32, store: &WeightStore, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f32, RANDOM_INIT_STD).expect("valid std");
    let noise = Tensor3::from_fn(3, height as usize, width as usize, |_, _, _| {
        dist.sample(&mut rng)
    });
    clamp_to_range(&noise, store.meta())
}

fn optimize(
    init: Tensor3,
    content: &ContentTarget,
    style: &StyleTarget,
    loss: &LossConfig,
    cfg: &TransferConfig,
    store: &WeightStore,
    observer: Option<Observer<'_>>,
) -> Result<Synthesis> {
    let shape = init.shape();
    let plane = init.plane_len();
    let meta = store.meta().clone();
    let objective = |x: &[f64]| -> Result<Evaluation> {
        let image = flat_to_tensor(x, shape);
        let e = total_loss(&image, content, style, loss, store, cfg.pooling)?;
        Ok(Evaluation {
            loss: e.loss,
            grad: tensor_to_flat(&e.grad),
            content_loss: e.breakdown.content,
            style_loss: e.breakdown.style,
        })
    };
    let project = move |x: &mut [f64]| clamp_flat(x, plane, &meta);
    let out = minimize_with(
        objective,
        tensor_to_flat(&init),
        &cfg.optimizer,
        Some(&project),
        observer,
    )?;
    let image = deprocess(&flat_to_tensor(&out.x, shape), store.meta())?;
    Ok(Synthesis {
        image,
        initial_loss: out.trace.initial_loss().unwrap_or(out.loss),
        final_loss: out.loss,
        final_style_loss: out.style_loss,
        trace: out.trace,
    })
}

/// Transfers the style of `style` onto `content`. The output has the
/// (possibly resized) content image's dimensions.
pub fn synthesize(
    content: &RgbImage,
    style: &RgbImage,
    cfg: &TransferConfig,
    store: &WeightStore,
) -> Result<Synthesis> {
    synthesize_observed(content, style, cfg, store, None)
}

/// [`synthesize`] reporting each optimizer iteration to `observer`.
pub fn synthesize_observed(
    content: &RgbImage,
    style: &RgbImage,
    cfg: &TransferConfig,
    store: &WeightStore,
    observer: Option<Observer<'_>>,
) -> Result<Synthesis> {
    cfg.validate()?;
    for (what, img) in [("content", content), ("style", style)] {
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::dim(format!("{what} image is empty")));
        }
    }
    let (mut content, style) = match cfg.output_size {
        Some(size) => (
            resize_long_edge(content, size),
            resize_long_edge(style, size),
        ),
        None => (content.clone(), style.clone()),
    };
    if let Some(a) = cfg.align {
        content = align_content(&content, a.rotation_deg, a.scale)?;
    }
    let content_t = preprocess(&content, store.meta())?;
    let style_t = preprocess(&style, store.meta())?;
    let content_tgt =
        ContentTarget::build(&content_t, &cfg.loss.content_layers, store, cfg.pooling)?;
    let style_tgt = StyleTarget::build(
        &style_t,
        &cfg.loss.weighted_style_layers(),
        store,
        cfg.pooling,
    )?;
    let init = match cfg.init {
        InitMode::Content => content_t,
        InitMode::Random => {
            random_init(content.width(), content.height(), store, cfg.optimizer.seed)
        }
    };
    optimize(
        init,
        &content_tgt,
        &style_tgt,
        &cfg.loss,
        cfg,
        store,
        observer,
    )
}

/// Style-only synthesis at `width × height` from random initialization.
pub fn synthesize_texture(
    style: &RgbImage,
    width: u32,
    height: u32,
    cfg: &TransferConfig,
    store: &WeightStore,
) -> Result<Synthesis> {
    synthesize_texture_observed(style, width, height, cfg, store, None)
}

/// [`synthesize_texture`] reporting each optimizer iteration to `observer`.
pub fn synthesize_texture_observed(
    style: &RgbImage,
    width: u32,
    height: u32,
    cfg: &TransferConfig,
    store: &WeightStore,
    observer: Option<Observer<'_>>,
) -> Result<Synthesis> {
    if cfg.init != InitMode::Random {
        return Err(Error::Parameter(
            "texture synthesis requires random initialization".into(),
        ));
    }
    if width == 0 || height == 0 || style.width() == 0 || style.height() == 0 {
        return Err(Error::dim(
            "texture synthesis needs non-empty style and output",
        ));
    }
    let mut cfg = cfg.clone();
    cfg.loss.content_layers.clear();
    cfg.loss.lambda = 1.0;
    cfg.validate()?;
    let style_t = preprocess(style, store.meta())?;
    let style_tgt = StyleTarget::build(
        &style_t,
        &cfg.loss.weighted_style_layers(),
        store,
        cfg.pooling,
    )?;
    let content_tgt = ContentTarget::build(&style_t, &[], store, cfg.pooling)?;
    let init = random_init(width, height, store, cfg.optimizer.seed);
    optimize(
        init,
        &content_tgt,
        &style_tgt,
        &cfg.loss,
        &cfg,
        store,
        observer,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bicubic,
}

/// Long-edge sizes `α_0 < α_1 < … < α_K` of the super-resolution stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    scales: Vec<u32>,
    #[serde(default)]
    interpolation: Interpolation,
}

impl ScaleSchedule {
    pub fn new(scales: Vec<u32>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Schedule("schedule needs at least one scale".into()));
        }
        if scales[0] == 0 {
            return Err(Error::Schedule("scales must be positive".into()));
        }
        if let Some(w) = scales.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Schedule(format!(
                "scales must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Self {
            scales,
            interpolation: Interpolation::Bicubic,
        })
    }

    /// Doubling from `start` until `end`, which is always the last scale.
    pub fn geometric(start: u32, end: u32) -> Result<Self> {
        if start == 0 || start > end {
            return Err(Error::Schedule(format!(
                "cannot build schedule from {start} to {end}"
            )));
        }
        let mut scales = vec![start];
        while let Some(next) = scales
            .last()
            .map(|s| s.saturating_mul(2))
            .filter(|&n| n < end)
        {
            scales.push(next);
        }
        if *scales.last().expect("non-empty") != end {
            scales.push(end);
        }
        Self::new(scales)
    }

    pub fn scales(&self) -> &[u32] {
        &self.scales
    }

    pub fn stages(&self) -> usize {
        self.scales.len()
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub scale: u32,
    pub style: RgbImage,
    /// Input `I_c^k` of this stage.
    pub content: RgbImage,
    pub result: Synthesis,
}

#[derive(Clone, Debug)]
pub struct SuperResolution {
    pub image: RgbImage,
    pub stages: Vec<Stage>,
}

/// Coarse-to-fine transfer: at each scale the style image is downsized and
/// the previous stage's result, upscaled, serves as content and initializer.
pub fn super_resolve(
    content: &RgbImage,
    style: &RgbImage,
    schedule: &ScaleSchedule,
    cfg: &TransferConfig,
    store: &WeightStore,
) -> Result<SuperResolution> {
    super_resolve_observed(content, style, schedule, cfg, store, None)
}

/// Called with the stage index and every trace entry of that stage.
pub type StageObserver<'a> = &'a dyn Fn(usize, &TraceEntry);

/// [`super_resolve`] reporting each optimizer iteration, with its stage index,
/// to `observer`.
pub fn super_resolve_observed(
    content: &RgbImage,
    style: &RgbImage,
    schedule: &ScaleSchedule,
    cfg: &TransferConfig,
    store: &WeightStore,
    observer: Option<StageObserver<'_>>,
) -> Result<SuperResolution> {
    if cfg.init != InitMode::Content {
        return Err(Error::Parameter(
            "super-resolution requires content initialization".into(),
        ));
    }
    let scales = schedule.scales();
    if long_edge(content) != scales[0] {
        return Err(Error::Schedule(format!(
            "content long edge {} does not match first scale {}",
            long_edge(content),
            scales[0]
        )));
    }
    if long_edge(style) != scales[scales.len() - 1] {
        return Err(Error::Schedule(format!(
            "style long edge {} does not match last scale {}",
            long_edge(style),
            scales[scales.len() - 1]
        )));
    }
    let mut stage_cfg = cfg.clone();
    stage_cfg.output_size = None;
    stage_cfg.align = None;
    let mut current = match cfg.align {
        Some(a) => align_content(content, a.rotation_deg, a.scale)?,
        None => content.clone(),
    };
    let (cw, ch) = content.dimensions();
    let mut stages = Vec::with_capacity(scales.len());
    for (k, &scale) in scales.iter().enumerate() {
        if k > 0 {
            let (w, h) = scaled_dims(cw, ch, scale);
            current = resize(&current, w, h);
        }
        let style_k = resize_long_edge(style, scale);
        let stage_observer = observer.map(|f| move |e: &TraceEntry| f(k, e));
        let result = synthesize_observed(
            &current,
            &style_k,
            &stage_cfg,
            store,
            stage_observer.as_ref().map(|f| f as Observer<'_>),
        )?;
        let next = result.image.clone();
        stages.push(Stage {
            scale,
            style: style_k,
            content: std::mem::replace(&mut current, next),
            result,
        });
    }
    Ok(SuperResolution {
        image: current,
        stages,
    })
}
