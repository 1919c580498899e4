//! Content-aware neural style transfer.
//!
//! The engine optimizes an image in pixel space so that its VGG-19 features
//! match a content image at a deep layer while its Gram statistics match a
//! style image across a multi-scale set of layers. Gradients are computed by
//! hand-written adjoints of the network's convolution, rectifier and pooling
//! kernels.
//!
//! Module map:
//! - [`tensor`]: tensors and forward/backward kernels
//! - [`vgg`]: the feature chain, weight container, preprocessing
//! - [`losses`]: content and Gram-matrix style terms
//! - [`optimizer`]: L-BFGS and Adam over pixels, trace export
//! - [`transfer`]: presets, synthesis, texture mode, super-resolution
//! - [`parts`]: part manifests, cropping and feathered merging
//! - [`resample`]: resizing and alignment
//! - [`gradcheck`]: finite-difference self-checks

pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod optimizer;
pub mod parts;
pub mod resample;
pub mod tensor;
pub mod transfer;
pub mod vgg;

pub use error::{Error, Result};
pub use losses::{
    gram, total_loss, ContentTarget, GramMatrix, LossConfig, StyleNormalization, StyleTarget,
};
pub use optimizer::{
    clamp_to_range, minimize, minimize_with, Method, Observer, OptTrace, OptimizerSettings,
    Projection, TraceEntry,
};
pub use parts::{merge_parts, split_parts, PartManifest, PartSide, Rect};
pub use resample::align_content;
pub use tensor::{ConvKernel, PoolMode, Tensor3};
pub use transfer::{
    preset, super_resolve, super_resolve_observed, synthesize, synthesize_observed,
    synthesize_texture, synthesize_texture_observed, InitMode, Preset, ScaleSchedule,
    StageObserver, TransferConfig,
};

/// Engine version recorded in every run's trace.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use vgg::{deprocess, feature_scale, preprocess, LayerName, WeightStore};
