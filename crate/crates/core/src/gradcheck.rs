//! Finite-difference verification of every backward pass at desk scale, on
//! seeded random weights. Central differences only ever call forward code, so
//! they are independent of the adjoints they check. The differenced forward
//! runs in `f64`: in `f32` a one-pixel perturbation moves a large loss by less
//! than its rounding noise.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{total_loss, ContentTarget, StyleTarget};
use crate::tensor::{
    conv2d_backward_input, conv2d_forward, pool_backward, pool_forward, relu_backward,
    relu_forward, ConvKernel, PoolMode, Tensor3,
};
use crate::transfer::Preset;
use crate::vgg::{self, LayerName, WeightStore};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckSettings {
    pub seed: u64,
    /// Central-difference half step for kernel checks (unit-scale inputs).
    pub kernel_step: f64,
    /// Half step for network checks, in 8-bit pixel units.
    pub image_step: f64,
    /// Pixels probed in the full-objective check.
    pub pixels: usize,
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            kernel_step: 1e-4,
            image_step: 1e-4,
            pixels: 30,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

impl GradCheckSettings {
    /// Same half step everywhere.
    pub fn with_step(mut self, step: f64) -> Self {
        self.kernel_step = step;
        self.image_step = step;
        self
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub probes: usize,
    pub tolerance: f64,
}

impl CheckResult {
    /// A check that skipped every probe proves nothing and fails.
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel_err < self.tolerance
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central difference of `f` along coordinate `index` of `x`.
pub fn central_difference(
    x: &Tensor3<f64>,
    index: usize,
    step: f64,
    mut f: impl FnMut(&Tensor3<f64>) -> Result<f64>,
) -> Result<f64> {
    let mut probe = x.clone();
    let base = x.as_slice()[index];
    let (up, down) = (base + step, base - step);
    probe.as_mut_slice()[index] = up;
    let f_up = f(&probe)?;
    probe.as_mut_slice()[index] = down;
    let f_down = f(&probe)?;
    Ok((f_up - f_down) / (up - down))
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f32) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-scale..scale))
}

fn random_kernel(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> ConvKernel {
    let weights = (0..out * inp * 9)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let bias = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
    ConvKernel::new(out, inp, weights, bias).expect("consistent shapes")
}

fn max_over<I: IntoIterator<Item = Result<f64>>>(it: I) -> Result<f64> {
    it.into_iter().try_fold(0.0f64, |m, e| Ok(m.max(e?)))
}

fn check_all_coords(
    x: &Tensor3,
    analytic: &Tensor3,
    step: f64,
    skip: impl Fn(usize) -> bool,
    f: impl Fn(&Tensor3<f64>) -> Result<f64>,
) -> Result<(f64, usize)> {
    let coords: Vec<usize> = (0..x.len()).filter(|&i| !skip(i)).collect();
    let x64 = x.cast::<f64>();
    let err = max_over(coords.iter().map(|&i| {
        let numeric = central_difference(&x64, i, step, &f)?;
        Ok(rel_err(analytic.as_slice()[i] as f64, numeric))
    }))?;
    Ok((err, coords.len()))
}

fn check_conv(s: &GradCheckSettings, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let x = random_tensor(rng, 2, 5, 5, 1.0);
    let k = random_kernel(rng, 3, 2);
    let probe = random_tensor(rng, 3, 5, 5, 1.0);
    let analytic = conv2d_backward_input(&probe, &k)?;
    check_all_coords(
        &x,
        &analytic,
        s.kernel_step,
        |_| false,
        |t| conv2d_forward(t, &k)?.dot(&probe.cast()),
    )
}

fn check_relu(s: &GradCheckSettings, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let x = random_tensor(rng, 3, 4, 4, 1.0);
    let probe = random_tensor(rng, 3, 4, 4, 1.0);
    let analytic = relu_backward(&probe, &x)?;
    // Stay away from the kink.
    let near_kink = |i: usize| (x.as_slice()[i] as f64).abs() < s.kernel_step.max(1e-3);
    check_all_coords(&x, &analytic, s.kernel_step, near_kink, |t| {
        relu_forward(t).dot(&probe.cast())
    })
}

fn check_pool(s: &GradCheckSettings, rng: &mut ChaCha8Rng, mode: PoolMode) -> Result<(f64, usize)> {
    let x = random_tensor(rng, 3, 7, 8, 1.0);
    let (out, record) = pool_forward(&x, mode)?;
    let (c, h, w) = out.shape();
    let probe = random_tensor(rng, c, h, w, 1.0);
    let analytic = pool_backward(&probe, &record)?;
    // In max mode, skip coordinates whose window's top two values are close
    // enough for the step to flip the argmax.
    let contested = |i: usize| {
        if mode != PoolMode::Max {
            return false;
        }
        let (ch, y, xx) = (i / (7 * 8), (i / 8) % 7, i % 8);
        let (y0, x0) = (y / 2 * 2, xx / 2 * 2);
        let v = x.at(ch, y, xx);
        (y0..(y0 + 2).min(7))
            .flat_map(|yy| (x0..(x0 + 2).min(8)).map(move |xx2| (yy, xx2)))
            .filter(|&(yy, xx2)| (yy, xx2) != (y, xx))
            .any(|(yy, xx2)| ((x.at(ch, yy, xx2) - v) as f64).abs() < 4.0 * s.kernel_step)
    };
    check_all_coords(&x, &analytic, s.kernel_step, contested, |t| {
        pool_forward(t, mode)?.0.dot(&probe.cast())
    })
}

/// Gradient of `‖f_conv3_1(x)‖²` through the real-shaped chain.
fn check_chain(
    s: &GradCheckSettings,
    store: &WeightStore,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let layer: LayerName = "conv3_1".parse().expect("known layer");
    let x = random_tensor(rng, 3, 16, 16, 100.0);
    let cache = vgg::forward(&x, store, &[layer], PoolMode::Average)?;
    let mut g = cache.activation(layer).expect("forwarded").clone();
    g.scale(2.0);
    let analytic = vgg::backward(&cache, store, &[(layer, g)].into_iter().collect())?;
    let pixels = sample(rng, x.len(), s.pixels.min(x.len())).into_vec();
    let x64 = x.cast::<f64>();
    let err = max_over(pixels.iter().map(|&i| {
        let numeric = central_difference(&x64, i, s.image_step, |t| {
            let c = vgg::forward(t, store, &[layer], PoolMode::Average)?;
            Ok(c.activation(layer).expect("forwarded").sum_squares())
        })?;
        Ok(rel_err(analytic.as_slice()[i] as f64, numeric))
    }))?;
    Ok((err, pixels.len()))
}

/// The full objective with the content-aware preset's layer sets.
fn check_objective(
    s: &GradCheckSettings,
    store: &WeightStore,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let cfg = Preset::V.config();
    let pooling = cfg.pooling;
    let content = random_tensor(rng, 3, 16, 16, 100.0);
    let style = random_tensor(rng, 3, 16, 16, 100.0);
    let x = random_tensor(rng, 3, 16, 16, 100.0);
    let content_tgt = ContentTarget::build(&content, &cfg.loss.content_layers, store, pooling)?;
    let style_tgt = StyleTarget::build(&style, &cfg.loss.weighted_style_layers(), store, pooling)?;
    let analytic = total_loss(&x, &content_tgt, &style_tgt, &cfg.loss, store, pooling)?.grad;
    let content64 = ContentTarget::build(
        &content.cast::<f64>(),
        &cfg.loss.content_layers,
        store,
        pooling,
    )?;
    let style64 = StyleTarget::build(
        &style.cast::<f64>(),
        &cfg.loss.weighted_style_layers(),
        store,
        pooling,
    )?;
    let pixels = sample(rng, x.len(), s.pixels.min(x.len())).into_vec();
    let x64 = x.cast::<f64>();
    let err = max_over(pixels.iter().map(|&i| {
        let numeric = central_difference(&x64, i, s.image_step, |t| {
            Ok(total_loss(t, &content64, &style64, &cfg.loss, store, pooling)?.loss)
        })?;
        Ok(rel_err(analytic.as_slice()[i] as f64, numeric))
    }))?;
    Ok((err, pixels.len()))
}

/// Runs every check; `store` defaults to seeded random weights.
pub fn run_all(
    settings: &GradCheckSettings,
    store: Option<&WeightStore>,
) -> Result<Vec<CheckResult>> {
    let owned;
    let store = match store {
        Some(s) => s,
        None => {
            owned = WeightStore::random(settings.seed);
            &owned
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut results = Vec::new();
    let mut push = |name, (max_rel_err, probes)| {
        results.push(CheckResult {
            name,
            max_rel_err,
            probes,
            tolerance: settings.tolerance,
        })
    };
    push("conv2d_backward_input", check_conv(settings, &mut rng)?);
    push("relu_backward", check_relu(settings, &mut rng)?);
    push(
        "pool_backward(avg)",
        check_pool(settings, &mut rng, PoolMode::Average)?,
    );
    push(
        "pool_backward(max)",
        check_pool(settings, &mut rng, PoolMode::Max)?,
    );
    push(
        "network_backward(conv3_1)",
        check_chain(settings, store, &mut rng)?,
    );
    push(
        "total_loss(preset V)",
        check_objective(settings, store, &mut rng)?,
    );
    Ok(results)
}
