//! Pixel-space minimization: L-BFGS with backtracking Armijo line search, and
//! Adam as a first-order fallback.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;
use crate::vgg::WeightMeta;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Lbfgs,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            rate: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub method: Method,
    pub max_iters: usize,
    pub history_size: usize,
    pub adam: AdamParams,
    pub grad_tol: f64,
    pub loss_rel_tol: f64,
    /// Seeds random initialization; the optimizers themselves are deterministic.
    pub seed: u64,
    /// Project onto the valid pixel range every this many iterations (0 = only
    /// at termination).
    pub clamp_every: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            method: Method::Lbfgs,
            max_iters: 500,
            history_size: 20,
            adam: AdamParams::default(),
            grad_tol: 1e-5,
            loss_rel_tol: 1e-6,
            seed: 0,
            clamp_every: 25,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Parameter("max_iters must be at least 1".into()));
        }
        if self.method == Method::Lbfgs && self.history_size == 0 {
            return Err(Error::Parameter("history_size must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0 && self.loss_rel_tol >= 0.0) {
            return Err(Error::Parameter("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

// Armijo constants.
const SUFFICIENT_DECREASE: f64 = 1e-4;
const BACKTRACK_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 20;
// Window for the relative-loss-change stopping test.
const LOSS_WINDOW: usize = 10;

/// What the objective reports at one point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub content_loss: f64,
    pub style_loss: f64,
}

impl Evaluation {
    /// For objectives without a content/style split.
    pub fn plain(loss: f64, grad: Vec<f64>) -> Self {
        Self {
            loss,
            grad,
            content_loss: 0.0,
            style_loss: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub loss: f64,
    pub content_loss: f64,
    pub style_loss: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub millis: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptTrace {
    pub entries: Vec<TraceEntry>,
}

impl OptTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.entries.first().map(|e| e.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    /// CSV with columns `iter,loss,content_loss,style_loss,grad_norm,step,millis`,
    /// preceded by `# key=value` comment lines. With `timings` off the millis
    /// column is left empty so that repeated runs produce identical files.
    pub fn write_csv<W: Write>(
        &self,
        mut out: W,
        stanza: &[(String, String)],
        timings: bool,
    ) -> std::io::Result<()> {
        for (key, value) in stanza {
            writeln!(out, "# {key}={value}")?;
        }
        writeln!(
            out,
            "iter,loss,content_loss,style_loss,grad_norm,step,millis"
        )?;
        for e in &self.entries {
            write!(
                out,
                "{},{},{},{},{},{},",
                e.iter, e.loss, e.content_loss, e.style_loss, e.grad_norm, e.step
            )?;
            if timings {
                write!(out, "{}", e.millis)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    GradientTolerance,
    LossTolerance,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct Minimized {
    pub x: Vec<f64>,
    pub loss: f64,
    pub content_loss: f64,
    pub style_loss: f64,
    pub trace: OptTrace,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Called with every trace entry as it is recorded.
pub type Observer<'a> = &'a dyn Fn(&TraceEntry);

/// Maps an iterate back into the feasible set in place.
pub type Projection<'a> = &'a dyn Fn(&mut [f64]);

struct Run<'a, F> {
    loss_fn: F,
    project: Option<Projection<'a>>,
    observer: Option<Observer<'a>>,
    started: Instant,
    trace: OptTrace,
    best: (Vec<f64>, Evaluation),
    last_good: (Vec<f64>, f64),
}

impl<'a, F> Run<'a, F>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    fn evaluate(&mut self, x: &[f64], iteration: usize) -> Result<Evaluation> {
        let e = (self.loss_fn)(x)?;
        if !e.loss.is_finite() || e.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration,
                last_good_loss: self.last_good.1,
                last_good: self.last_good.0.clone(),
            });
        }
        self.last_good = (x.to_vec(), e.loss);
        if e.loss < self.best.1.loss {
            self.best = (x.to_vec(), e.clone());
        }
        Ok(e)
    }

    fn record(&mut self, iter: usize, e: &Evaluation, step: f64) {
        let entry = TraceEntry {
            iter,
            loss: e.loss,
            content_loss: e.content_loss,
            style_loss: e.style_loss,
            grad_norm: norm(&e.grad),
            step,
            millis: self.started.elapsed().as_millis() as u64,
        };
        if let Some(observe) = self.observer {
            observe(&entry);
        }
        self.trace.entries.push(entry);
    }

    /// Periodic projection; returns the re-evaluated point when it moved.
    fn maybe_project(
        &mut self,
        x: &mut [f64],
        iter: usize,
        every: usize,
    ) -> Result<Option<Evaluation>> {
        let Some(project) = self.project else {
            return Ok(None);
        };
        if every == 0 || !iter.is_multiple_of(every) {
            return Ok(None);
        }
        let before = x.to_vec();
        project(x);
        if before == x {
            return Ok(None);
        }
        self.evaluate(x, iter).map(Some)
    }

    fn loss_stalled(&self, tol: f64) -> bool {
        let entries = &self.trace.entries;
        if entries.len() <= LOSS_WINDOW {
            return false;
        }
        let now = entries[entries.len() - 1].loss;
        let then = entries[entries.len() - 1 - LOSS_WINDOW].loss;
        (then - now).abs() <= tol * then.abs().max(f64::MIN_POSITIVE)
    }

    fn finish(mut self, stop: StopReason) -> Result<Minimized> {
        let (mut x, mut e) = self.best.clone();
        if let Some(project) = self.project {
            let before = x.clone();
            project(&mut x);
            if before != x {
                let iteration = self.trace.entries.last().map_or(0, |t| t.iter);
                e = self.evaluate(&x, iteration)?;
            }
        }
        Ok(Minimized {
            x,
            loss: e.loss,
            content_loss: e.content_loss,
            style_loss: e.style_loss,
            trace: self.trace,
            stop,
        })
    }
}

/// Minimizes `loss_fn` from `init`. Returns the best iterate seen, projected
/// by `project` if one is given.
pub fn minimize<F>(
    loss_fn: F,
    init: Vec<f64>,
    settings: &OptimizerSettings,
    project: Option<Projection<'_>>,
) -> Result<Minimized>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    minimize_with(loss_fn, init, settings, project, None)
}

/// [`minimize`] with an observer that sees each trace entry as it is recorded.
pub fn minimize_with<F>(
    loss_fn: F,
    init: Vec<f64>,
    settings: &OptimizerSettings,
    project: Option<Projection<'_>>,
    observer: Option<Observer<'_>>,
) -> Result<Minimized>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    settings.validate()?;
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("initial point is not finite".into()));
    }
    let mut run = Run {
        loss_fn,
        project,
        observer,
        started: Instant::now(),
        trace: OptTrace::default(),
        best: (init.clone(), Evaluation::plain(f64::INFINITY, Vec::new())),
        last_good: (init.clone(), f64::NAN),
    };
    let first = run.evaluate(&init, 0)?;
    run.record(0, &first, 0.0);
    match settings.method {
        Method::Lbfgs => lbfgs(run, init, first, settings),
        Method::Adam => adam(run, init, first, settings),
    }
}

fn lbfgs<F>(
    mut run: Run<'_, F>,
    mut x: Vec<f64>,
    mut current: Evaluation,
    settings: &OptimizerSettings,
) -> Result<Minimized>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let n = x.len();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    for iter in 1..=settings.max_iters {
        if norm(&current.grad) <= settings.grad_tol {
            return run.finish(StopReason::GradientTolerance);
        }

        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                if history.is_empty() {
                    break;
                }
                history.clear();
            }
            let direction = two_loop(&current.grad, &history);
            let (direction, slope) = match dot(&current.grad, &direction) {
                s if s < 0.0 => (direction, s),
                _ => {
                    history.clear();
                    let d: Vec<f64> = current.grad.iter().map(|g| -g).collect();
                    let s = -dot(&current.grad, &current.grad);
                    (d, s)
                }
            };
            let mut step = if history.is_empty() {
                1.0 / norm(&current.grad)
            } else {
                1.0
            };
            let mut trial = vec![0.0; n];
            for _ in 0..=MAX_BACKTRACKS {
                for i in 0..n {
                    trial[i] = x[i] + step * direction[i];
                }
                let e = run.evaluate(&trial, iter)?;
                if e.loss <= current.loss + SUFFICIENT_DECREASE * step * slope {
                    accepted = Some((trial, e, step));
                    break;
                }
                step *= BACKTRACK_SHRINK;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((next_x, next, step)) = accepted else {
            return run.finish(StopReason::LineSearchFailed);
        };

        let s: Vec<f64> = next_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next
            .grad
            .iter()
            .zip(&current.grad)
            .map(|(a, b)| a - b)
            .collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y) && sy > 0.0 {
            if history.len() == settings.history_size {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = next_x;
        current = next;
        if let Some(projected) = run.maybe_project(&mut x, iter, settings.clamp_every)? {
            current = projected;
        }
        run.record(iter, &current, step);
        if run.loss_stalled(settings.loss_rel_tol) {
            return run.finish(StopReason::LossTolerance);
        }
    }
    run.finish(StopReason::MaxIters)
}

/// `-H·g` from the stored curvature pairs, with the usual `sᵀy / yᵀy` initial
/// scaling.
fn two_loop(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    for qi in &mut q {
        *qi = -*qi;
    }
    q
}

fn adam<F>(
    mut run: Run<'_, F>,
    mut x: Vec<f64>,
    mut current: Evaluation,
    settings: &OptimizerSettings,
) -> Result<Minimized>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let p = settings.adam;
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    for iter in 1..=settings.max_iters {
        if norm(&current.grad) <= settings.grad_tol {
            return run.finish(StopReason::GradientTolerance);
        }
        let (c1, c2) = (
            1.0 - p.beta1.powi(iter as i32),
            1.0 - p.beta2.powi(iter as i32),
        );
        for i in 0..x.len() {
            let g = current.grad[i];
            m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g;
            v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g * g;
            x[i] -= p.rate * (m[i] / c1) / ((v[i] / c2).sqrt() + p.eps);
        }
        current = run.evaluate(&x, iter)?;
        if let Some(projected) = run.maybe_project(&mut x, iter, settings.clamp_every)? {
            current = projected;
        }
        run.record(iter, &current, p.rate);
        if run.loss_stalled(settings.loss_rel_tol) {
            return run.finish(StopReason::LossTolerance);
        }
    }
    run.finish(StopReason::MaxIters)
}

/// Clamps a preprocessed image so that its deprocessed pixels lie in `[0, 255]`.
pub fn clamp_to_range(image: &Tensor3, meta: &WeightMeta) -> Tensor3 {
    let mut out = image.clone();
    let plane = out.plane_len();
    for (c, chunk) in out.as_mut_slice().chunks_mut(plane.max(1)).enumerate() {
        let (lo, hi) = (-meta.mean[c % 3], 255.0 - meta.mean[c % 3]);
        for v in chunk {
            *v = v.clamp(lo, hi);
        }
    }
    out
}

/// [`clamp_to_range`] on a flattened `3 × plane` image.
pub(crate) fn clamp_flat(values: &mut [f64], plane: usize, meta: &WeightMeta) {
    for (c, chunk) in values.chunks_mut(plane.max(1)).enumerate() {
        let (lo, hi) = (-(meta.mean[c % 3] as f64), 255.0 - meta.mean[c % 3] as f64);
        for v in chunk {
            *v = v.clamp(lo, hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bowl(target: Vec<f64>) -> impl FnMut(&[f64]) -> Result<Evaluation> {
        move |x: &[f64]| {
            let loss = x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
            let grad = x.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            Ok(Evaluation::plain(loss, grad))
        }
    }

    fn random_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn lbfgs_solves_quadratic_bowl() {
        let target = random_vec(1, 40);
        let settings = OptimizerSettings {
            max_iters: 50,
            grad_tol: 1e-10,
            loss_rel_tol: 0.0,
            ..Default::default()
        };
        let out = minimize(bowl(target.clone()), random_vec(2, 40), &settings, None).unwrap();
        assert!(
            dist(&out.x, &target) < 1e-4,
            "distance {}",
            dist(&out.x, &target)
        );
        assert!(out.trace.len() <= 51);
    }

    #[test]
    fn starts_at_minimum() {
        let target = random_vec(3, 10);
        let out = minimize(
            bowl(target.clone()),
            target.clone(),
            &Default::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::GradientTolerance);
        assert!((1..=2).contains(&out.trace.len()));
        assert_eq!(out.x, target);
    }

    #[test]
    fn adam_reaches_bowl_minimum() {
        let target = random_vec(4, 20);
        let settings = OptimizerSettings {
            method: Method::Adam,
            max_iters: 500,
            adam: AdamParams {
                rate: 0.05,
                ..Default::default()
            },
            grad_tol: 0.0,
            loss_rel_tol: 0.0,
            ..Default::default()
        };
        let out = minimize(bowl(target.clone()), random_vec(5, 20), &settings, None).unwrap();
        assert!(
            dist(&out.x, &target) < 1e-2,
            "distance {}",
            dist(&out.x, &target)
        );
    }

    #[test]
    fn accepted_losses_never_increase() {
        // Rosenbrock-like valley.
        let f = |x: &[f64]| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; x.len()];
            for i in 0..x.len() - 1 {
                let a = x[i + 1] - x[i] * x[i];
                let b = 1.0 - x[i];
                loss += 10.0 * a * a + b * b;
                grad[i] += -40.0 * x[i] * a - 2.0 * b;
                grad[i + 1] += 20.0 * a;
            }
            Ok(Evaluation::plain(loss, grad))
        };
        let settings = OptimizerSettings {
            max_iters: 200,
            ..Default::default()
        };
        let out = minimize(f, random_vec(6, 6), &settings, None).unwrap();
        let losses: Vec<f64> = out.trace.entries.iter().map(|e| e.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.loss <= losses[0]);
    }

    #[test]
    fn nan_aborts_with_last_good_iterate() {
        let mut calls = 0;
        let f = |x: &[f64]| {
            calls += 1;
            let loss = if calls > 2 {
                f64::NAN
            } else {
                x.iter().map(|v| v * v).sum()
            };
            Ok(Evaluation::plain(loss, x.iter().map(|v| 2.0 * v).collect()))
        };
        match minimize(f, vec![1.0, 2.0], &Default::default(), None) {
            Err(Error::NonFinite {
                last_good,
                last_good_loss,
                ..
            }) => {
                assert_eq!(last_good.len(), 2);
                assert!(last_good_loss.is_finite());
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_traces() {
        let target = random_vec(7, 15);
        let settings = OptimizerSettings {
            max_iters: 30,
            ..Default::default()
        };
        let a = minimize(bowl(target.clone()), random_vec(8, 15), &settings, None).unwrap();
        let b = minimize(bowl(target), random_vec(8, 15), &settings, None).unwrap();
        let strip = |t: &OptTrace| {
            t.entries
                .iter()
                .map(|e| (e.iter, e.loss, e.grad_norm, e.step))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.trace), strip(&b.trace));
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn projection_applied_at_termination() {
        let target = vec![5.0, -5.0];
        let project = |x: &mut [f64]| {
            for v in x {
                *v = v.clamp(-1.0, 1.0);
            }
        };
        let out = minimize(
            bowl(target),
            vec![0.0, 0.0],
            &Default::default(),
            Some(&project),
        )
        .unwrap();
        assert_eq!(out.x, vec![1.0, -1.0]);
        assert_eq!(out.loss, 32.0);
    }

    #[test]
    fn clamp_cases() {
        let meta = WeightMeta::default();
        let inside = Tensor3::from_fn(3, 2, 2, |c, _, _| 10.0 - c as f32);
        assert_eq!(clamp_to_range(&inside, &meta), inside);
        let big = Tensor3::from_fn(3, 1, 1, |_, _, _| 1000.0);
        let clamped = clamp_to_range(&big, &meta);
        for c in 0..3 {
            assert_eq!(clamped.at(c, 0, 0), 255.0 - meta.mean[c]);
        }
    }

    #[test]
    fn csv_layout() {
        let trace = OptTrace {
            entries: vec![TraceEntry {
                iter: 0,
                loss: 1.5,
                content_loss: 0.5,
                style_loss: 0.05,
                grad_norm: 2.0,
                step: 0.0,
                millis: 12,
            }],
        };
        let mut buf = Vec::new();
        trace
            .write_csv(&mut buf, &[("seed".into(), "7".into())], false)
            .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# seed=7\niter,loss,content_loss,style_loss,grad_norm,step,millis\n0,1.5,0.5,0.05,2,0,\n"
        );
    }
}
