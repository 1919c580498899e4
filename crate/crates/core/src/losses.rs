//! The transfer objective: a feature-matching content term plus a weighted
//! Gram-matrix style term, with analytic gradients injected per layer and
//! pulled back to the image by [`vgg::backward`](crate::vgg::backward).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{PoolMode, Real, Tensor3};
use crate::vgg::{self, LayerName, WeightStore};

/// Uncentered channel inner products of one feature map, `G[i][j] = Σ_p f_i(p) f_j(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    channels: usize,
    positions: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial positions `N` of the map the matrix was computed from.
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.channels + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn to_f64<T: Real>(t: &Tensor3<T>) -> Vec<f64> {
    t.as_slice().iter().map(|&v| v.to_f64()).collect()
}

/// Row-major `m×k · k×n`, or `m×k · (n×k)ᵀ` when `b_transposed`.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, b_transposed: bool) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths match the m×k, k×n and m×n operands and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub fn gram<T: Real>(feature: &Tensor3<T>) -> Result<GramMatrix> {
    let (c, h, w) = feature.shape();
    if c == 0 || h * w == 0 {
        return Err(Error::dim(format!(
            "cannot take Gram matrix of empty {c}x{h}x{w} map"
        )));
    }
    let n = h * w;
    let f = to_f64(feature);
    let mut data = matmul(&f, &f, c, n, c, true);
    for i in 0..c {
        for j in i + 1..c {
            data[j * c + i] = data[i * c + j];
        }
    }
    Ok(GramMatrix {
        channels: c,
        positions: n,
        data,
    })
}

/// Per-layer scaling of the style term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleNormalization {
    /// `1 / (4 C² N²)`, applied by comparing `G / N` of each image so that maps
    /// of different spatial size remain comparable.
    #[default]
    Size,
    /// Bare `w_l`.
    Raw,
}

/// `Σ (current − target)²` and its gradient `2 (current − target)`.
pub fn content_term<T: Real>(
    current: &Tensor3<T>,
    target: &Tensor3<T>,
) -> Result<(f64, Tensor3<T>)> {
    current.check_same_shape(target, "content term")?;
    let mut loss = 0.0f64;
    let grad = current
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            loss += d * d;
            T::from_f64(2.0 * d)
        })
        .collect();
    let (c, h, w) = current.shape();
    Ok((loss, Tensor3::new(c, h, w, grad)?))
}

/// Weighted squared Frobenius distance between the Gram matrix of `current`
/// and `target`, with its gradient with respect to `current`.
pub fn style_term<T: Real>(
    current: &Tensor3<T>,
    target: &GramMatrix,
    weight: f64,
    normalization: StyleNormalization,
) -> Result<(f64, Tensor3<T>)> {
    let (c, h, w) = current.shape();
    if c != target.channels {
        return Err(Error::dim(format!(
            "style term: map has {c} channels, target Gram has {}",
            target.channels
        )));
    }
    let n = h * w;
    let current_gram = gram(current)?;
    let (diff, loss_scale, grad_scale) = match normalization {
        StyleNormalization::Size => {
            let (inv_cur, inv_tgt) = (1.0 / n as f64, 1.0 / target.positions as f64);
            let diff: Vec<f64> = current_gram
                .data
                .iter()
                .zip(&target.data)
                .map(|(a, b)| a * inv_cur - b * inv_tgt)
                .collect();
            let cc = (c * c) as f64;
            (diff, weight / (4.0 * cc), weight / (cc * n as f64))
        }
        StyleNormalization::Raw => {
            let diff: Vec<f64> = current_gram
                .data
                .iter()
                .zip(&target.data)
                .map(|(a, b)| a - b)
                .collect();
            (diff, weight, 4.0 * weight)
        }
    };
    let loss = loss_scale * diff.iter().map(|d| d * d).sum::<f64>();
    let f = to_f64(current);
    let grad = matmul(&diff, &f, c, c, n, false)
        .into_iter()
        .map(|v| T::from_f64(grad_scale * v))
        .collect();
    Ok((loss, Tensor3::new(c, h, w, grad)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub content_layers: Vec<LayerName>,
    pub style_layers: Vec<LayerName>,
    /// One positive weight per style layer; `None` means `1 / |style_layers|`
    /// for every layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_weights: Option<Vec<f64>>,
    pub lambda: f64,
    #[serde(default)]
    pub normalization: StyleNormalization,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if let Some(weights) = &self.style_weights {
            if weights.len() != self.style_layers.len() {
                return Err(Error::Parameter(format!(
                    "{} style weights given for {} style layers",
                    weights.len(),
                    self.style_layers.len()
                )));
            }
            if let Some(bad) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
                return Err(Error::Parameter(format!(
                    "style weight {bad} is not positive"
                )));
            }
        }
        for (name, layers) in [
            ("content", &self.content_layers),
            ("style", &self.style_layers),
        ] {
            let mut sorted = layers.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != layers.len() {
                return Err(Error::Parameter(format!("duplicate {name} layer")));
            }
        }
        Ok(())
    }

    /// `(layer, w_l)` pairs with defaults resolved.
    pub fn weighted_style_layers(&self) -> Vec<(LayerName, f64)> {
        let uniform = 1.0 / self.style_layers.len().max(1) as f64;
        self.style_layers
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let w = self.style_weights.as_ref().map_or(uniform, |ws| ws[i]);
                (l, w)
            })
            .collect()
    }

    /// Every layer the objective reads, in network order.
    pub fn required_layers(&self) -> Vec<LayerName> {
        let mut layers: Vec<LayerName> = self
            .content_layers
            .iter()
            .chain(&self.style_layers)
            .copied()
            .collect();
        layers.sort();
        layers.dedup();
        layers
    }
}

#[derive(Clone, Debug)]
pub struct ContentTarget<T = f32> {
    layers: Vec<(LayerName, Tensor3<T>)>,
}

impl<T: Real> ContentTarget<T> {
    pub fn build(
        content: &Tensor3<T>,
        layers: &[LayerName],
        store: &WeightStore,
        pooling: PoolMode,
    ) -> Result<Self> {
        let cache = vgg::forward(content, store, layers, pooling)?;
        Ok(Self {
            layers: layers
                .iter()
                .map(|&l| (l, cache.activation(l).expect("forwarded").clone()))
                .collect(),
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerName> + '_ {
        self.layers.iter().map(|(l, _)| *l)
    }

    pub fn feature(&self, layer: LayerName) -> Option<&Tensor3<T>> {
        self.layers
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, t)| t)
    }
}

#[derive(Clone, Debug)]
pub struct StyleTarget {
    layers: Vec<(LayerName, GramMatrix, f64)>,
}

impl StyleTarget {
    pub fn build<T: Real>(
        style: &Tensor3<T>,
        layers: &[(LayerName, f64)],
        store: &WeightStore,
        pooling: PoolMode,
    ) -> Result<Self> {
        let names: Vec<LayerName> = layers.iter().map(|(l, _)| *l).collect();
        let cache = vgg::forward(style, store, &names, pooling)?;
        let layers = layers
            .iter()
            .map(|&(l, w)| Ok((l, gram(cache.activation(l).expect("forwarded"))?, w)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerName> + '_ {
        self.layers.iter().map(|(l, _, _)| *l)
    }

    pub fn gram(&self, layer: LayerName) -> Option<&GramMatrix> {
        self.layers
            .iter()
            .find(|(l, _, _)| *l == layer)
            .map(|(_, g, _)| g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    Content,
    Style,
}

/// One layer's contribution, before multiplication by λ for style terms.
#[derive(Clone, Copy, Debug)]
pub struct LayerTerm {
    pub layer: LayerName,
    pub kind: TermKind,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub content: f64,
    /// Style sum before λ.
    pub style: f64,
    pub terms: Vec<LayerTerm>,
}

#[derive(Clone, Debug)]
pub struct LossEvaluation<T = f32> {
    pub loss: f64,
    pub grad: Tensor3<T>,
    pub breakdown: LossBreakdown,
}

/// `content + λ · style` at `image`, with the gradient from one forward and
/// one backward pass.
pub fn total_loss<T: Real>(
    image: &Tensor3<T>,
    content: &ContentTarget<T>,
    style: &StyleTarget,
    cfg: &LossConfig,
    store: &WeightStore,
    pooling: PoolMode,
) -> Result<LossEvaluation<T>> {
    if !content.layers().eq(cfg.content_layers.iter().copied())
        || !style.layers().eq(cfg.style_layers.iter().copied())
    {
        return Err(Error::Parameter(
            "loss targets were built for different layer sets than the config".into(),
        ));
    }
    let cache = vgg::forward(image, store, &cfg.required_layers(), pooling)?;
    let mut grads: BTreeMap<LayerName, Tensor3<T>> = BTreeMap::new();
    let mut inject = |layer: LayerName, g: Tensor3<T>| -> Result<()> {
        match grads.get_mut(&layer) {
            Some(existing) => existing.add_assign(&g),
            None => {
                grads.insert(layer, g);
                Ok(())
            }
        }
    };
    let mut terms = Vec::new();
    let (mut content_sum, mut style_sum) = (0.0, 0.0);

    for (layer, target) in &content.layers {
        let (value, grad) = content_term(cache.activation(*layer).expect("forwarded"), target)?;
        content_sum += value;
        terms.push(LayerTerm {
            layer: *layer,
            kind: TermKind::Content,
            value,
        });
        inject(*layer, grad)?;
    }
    for (layer, target, weight) in &style.layers {
        let (value, mut grad) = style_term(
            cache.activation(*layer).expect("forwarded"),
            target,
            *weight,
            cfg.normalization,
        )?;
        style_sum += value;
        terms.push(LayerTerm {
            layer: *layer,
            kind: TermKind::Style,
            value,
        });
        grad.scale(cfg.lambda);
        inject(*layer, grad)?;
    }

    let grad = vgg::backward(&cache, store, &grads)?;
    Ok(LossEvaluation {
        loss: content_sum + cfg.lambda * style_sum,
        grad,
        breakdown: LossBreakdown {
            content: content_sum,
            style: style_sum,
            terms,
        },
    })
}
