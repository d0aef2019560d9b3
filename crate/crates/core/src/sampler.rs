//! Langevin-dynamics sampling of activating inputs.
//!
//! Two update rules are available. `Free` mode follows the momentum recipe
//!
//! ```text
//! g  = w·N(∇f) + Σ λ_i N(∇R_i) + η,   η ~ N(0, (σ√T)² I)
//! v ← γ v + β_t g
//! x ← x + v
//! ```
//!
//! where `N` is optional unit-L2 normalization. `Principled` mode is plain SGLD
//! targeting the density `∝ exp((w f + Σ λ_i R_i) / T)`:
//!
//! ```text
//! x ← x + β_t (w ∇f + Σ λ_i ∇R_i) / T + N(0, 2 β_t I)
//! ```
//!
//! Principled mode ignores `momentum` and `normalize_gradients`.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LdamError, Result};
use crate::frame::{FrameMessage, FrameParams};
use crate::model::{neuron_value_grad, Checkpoint, NeuronRef, Stage};
use crate::regularizers::{disc_value_grad, RegularizerKind, RegularizerSpec};
use crate::targets::Objective;
use crate::tensor::Tensor;

pub const DEFAULT_INIT_STD: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Principled,
    #[default]
    Free,
}

/// `β_t = a (b + t)^(-μ)` with `t` counted from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub a: f64,
    pub b: f64,
    pub mu: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            a: 0.1,
            b: 10.0,
            mu: 0.6,
        }
    }
}

impl StepSchedule {
    pub fn constant(beta: f64) -> Self {
        Self {
            a: beta,
            b: 0.0,
            mu: 0.0,
        }
    }

    /// Step size of the `t`-th update (1-based).
    pub fn beta(&self, t: u64) -> f64 {
        self.a * (self.b + t as f64).powf(-self.mu)
    }

    fn validate(&self, mode: SamplerMode) -> Result<()> {
        let bad = |m: String| Err(LdamError::InvalidArgument(m));
        if !(self.a.is_finite() && self.a > 0.0) {
            return bad(format!("schedule a must be > 0, got {}", self.a));
        }
        if !(self.b.is_finite() && self.b >= 0.0) {
            return bad(format!("schedule b must be >= 0, got {}", self.b));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad(format!("schedule mu must be >= 0, got {}", self.mu));
        }
        // A constant step is allowed so stationary behavior can be measured.
        if mode == SamplerMode::Principled && self.mu != 0.0 && !(self.mu > 0.5 && self.mu <= 1.0) {
            return bad(format!(
                "principled mode needs mu in (0.5, 1] or mu = 0, got {}",
                self.mu
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurnInConfig {
    /// Number of recent activations examined.
    pub window: usize,
    /// Fraction of the best windowed mean that must be reached.
    pub threshold: f64,
    /// Maximum windowed standard deviation relative to the windowed mean.
    pub stability: f64,
}

impl Default for BurnInConfig {
    fn default() -> Self {
        Self {
            window: 500,
            threshold: 0.9,
            stability: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub temperature: f32,
    /// Noise standard deviation (free mode only).
    pub sigma: f32,
    pub schedule: StepSchedule,
    pub momentum: f32,
    pub normalize_gradients: bool,
    /// Weight of the activation term; 0 samples from the regularizers alone.
    pub activation_weight: f32,
    pub regularizers: Vec<RegularizerSpec>,
    pub init_std: f32,
    pub seed: u64,
    pub burn_in: BurnInConfig,
    /// Number of recent post-burn-in samples averaged; 0 keeps all of them.
    pub avg_window: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Free,
            temperature: 1.0,
            sigma: 0.01,
            schedule: StepSchedule::default(),
            momentum: 0.9,
            normalize_gradients: true,
            activation_weight: 1.0,
            regularizers: Vec::new(),
            init_std: DEFAULT_INIT_STD,
            seed: 0,
            burn_in: BurnInConfig::default(),
            avg_window: 200,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LdamError::InvalidArgument(m));
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.activation_weight.is_finite() && self.activation_weight >= 0.0) {
            return bad(format!(
                "activation weight must be >= 0, got {}",
                self.activation_weight
            ));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("init_std must be > 0, got {}", self.init_std));
        }
        let b = &self.burn_in;
        if b.window == 0 {
            return bad("burn-in window must be positive".into());
        }
        if !(b.threshold.is_finite() && (0.0..=1.0).contains(&b.threshold)) {
            return bad(format!("burn-in threshold must be in [0, 1], got {}", b.threshold));
        }
        if !(b.stability.is_finite() && b.stability >= 0.0) {
            return bad(format!("burn-in stability must be >= 0, got {}", b.stability));
        }
        for r in &self.regularizers {
            r.validate()?;
        }
        self.schedule.validate(self.mode)
    }

    /// Momentum actually applied by the update rule.
    pub fn effective_momentum(&self) -> f32 {
        match self.mode {
            SamplerMode::Free => self.momentum,
            SamplerMode::Principled => 0.0,
        }
    }

    pub fn effective_normalize(&self) -> bool {
        self.mode == SamplerMode::Free && self.normalize_gradients
    }

    fn uses_discriminator(&self) -> bool {
        self.regularizers
            .iter()
            .any(|r| r.kind == RegularizerKind::Discriminator)
    }
}

/// Windowed activation statistics deciding when sampling has settled.
///
/// Fires once the window is full, its mean is within `1 - threshold` (relative)
/// of the best windowed mean seen so far, and its standard deviation is at most
/// `stability · |mean|`. Stays fired until reset.
#[derive(Debug, Clone, Default)]
pub struct BurnInTracker {
    history: VecDeque<f64>,
    sum: f64,
    sum_sq: f64,
    best_mean: Option<f64>,
    done: bool,
    pushes: u64,
}

impl BurnInTracker {
    pub fn done(&self) -> bool {
        self.done
    }

    pub fn push(&mut self, activation: f64, cfg: &BurnInConfig) -> bool {
        self.pushes += 1;
        self.history.push_back(activation);
        self.sum += activation;
        self.sum_sq += activation * activation;
        while self.history.len() > cfg.window {
            let old = self.history.pop_front().expect("non-empty");
            self.sum -= old;
            self.sum_sq -= old * old;
        }
        if self.history.len() < cfg.window {
            return self.done;
        }
        // Re-sum periodically so cancellation error cannot accumulate.
        if self.pushes % 4096 == 0 {
            self.sum = self.history.iter().sum();
            self.sum_sq = self.history.iter().map(|a| a * a).sum();
        }
        let n = self.history.len() as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        let best = self.best_mean.map_or(mean, |b| b.max(mean));
        self.best_mean = Some(best);
        if !self.done {
            let reached = mean >= best - (1.0 - cfg.threshold) * best.abs();
            let stable = var.sqrt() <= cfg.stability * mean.abs();
            self.done = reached && stable;
        }
        self.done
    }

    /// Windowed mean, once the window is full.
    pub fn window_mean(&self, cfg: &BurnInConfig) -> Option<f64> {
        (self.history.len() >= cfg.window).then(|| self.sum / self.history.len() as f64)
    }
}

/// Streaming mean of the most recent `window` samples (all samples if 0).
#[derive(Debug, Clone, Default)]
pub struct SampleAverager {
    window: usize,
    kept: VecDeque<Vec<f32>>,
    sum: Vec<f64>,
    count: usize,
    shape: Vec<usize>,
}

impl SampleAverager {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            ..Default::default()
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &Tensor) {
        if self.count == 0 {
            self.sum = vec![0.0; x.len()];
            self.shape = x.shape().to_vec();
        }
        for (s, &v) in self.sum.iter_mut().zip(x.data()) {
            *s += v as f64;
        }
        self.count += 1;
        if self.window > 0 {
            self.kept.push_back(x.data().to_vec());
            self.evict();
        }
    }

    /// Changes the window, dropping the oldest samples if it shrank.
    pub fn set_window(&mut self, window: usize) {
        if window != self.window {
            if self.window == 0 && window > 0 {
                // Individual samples were not retained; restart the average.
                *self = Self::new(window);
                return;
            }
            self.window = window;
            if window == 0 {
                self.kept.clear();
            } else {
                self.evict();
            }
        }
    }

    fn evict(&mut self) {
        while self.kept.len() > self.window {
            let old = self.kept.pop_front().expect("non-empty");
            for (s, v) in self.sum.iter_mut().zip(old) {
                *s -= v as f64;
            }
            self.count -= 1;
        }
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.count == 0 {
            return Err(LdamError::NoSamples);
        }
        let n = self.count as f64;
        Tensor::new(
            self.shape.clone(),
            self.sum.iter().map(|&s| (s / n) as f32).collect(),
        )
    }
}

/// Everything that evolves during sampling.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub x: Tensor,
    pub v: Tensor,
    /// Number of completed updates.
    pub t: u64,
    pub rng: ChaCha8Rng,
    pub burn_in: BurnInTracker,
    pub average: SampleAverager,
}

/// `x₀ ~ N(0, init_std² I)` from the config's seed, `v₀ = 0`.
pub fn init_state(cfg: &SamplerConfig, shape: &[usize]) -> Result<SamplerState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| cfg.init_std * rng.sample::<f32, _>(StandardNormal))
        .collect();
    let x = Tensor::new(shape.to_vec(), data)?;
    Ok(SamplerState {
        v: Tensor::zeros(shape),
        x,
        t: 0,
        rng,
        burn_in: BurnInTracker::default(),
        average: SampleAverager::new(cfg.avg_window),
    })
}

pub fn burn_in_check(state: &SamplerState) -> bool {
    state.burn_in.done()
}

pub fn sample_average(state: &SamplerState) -> Result<Tensor> {
    state.average.mean()
}

/// Maps `x` to bytes with zero at mid-gray: `round(clamp(127 x / max|x|, -128, 127)) + 128`.
pub fn to_display(x: &[f32]) -> Vec<u8> {
    let m = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let s = if m > 0.0 && m.is_finite() { 127.0 / m } else { 0.0 };
    x.iter()
        .map(|&v| {
            let p = (s * v).clamp(-128.0, 127.0).round();
            // NaN falls through clamp; show it as mid-gray.
            if p.is_nan() {
                128
            } else {
                (p as i32 + 128) as u8
            }
        })
        .collect()
}

/// Objective, regularizer and discriminator evaluation at the current sample.
#[derive(Debug, Clone)]
struct Evaluation {
    activation: f64,
    grad: Option<Tensor>,
    reg_values: Vec<f64>,
    reg_grads: Vec<Option<Tensor>>,
    disc_score: Option<f64>,
}

/// Summary of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub activation: f64,
    pub disc_score: Option<f64>,
    pub burn_in_done: bool,
}

/// One sampling chain: an objective, an optional discriminator, a config and
/// the evolving state.
pub struct Chain {
    objective: Arc<dyn Objective>,
    discriminator: Option<Arc<Checkpoint>>,
    cfg: SamplerConfig,
    state: SamplerState,
    eval: Option<Evaluation>,
    revision: u64,
    warning: Option<String>,
}

impl std::fmt::Debug for Chain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Chain")
            .field("cfg", &self.cfg)
            .field("t", &self.state.t)
            .field("revision", &self.revision)
            .finish_non_exhaustive()
    }
}

impl Chain {
    pub fn new(
        objective: Arc<dyn Objective>,
        discriminator: Option<Arc<Checkpoint>>,
        cfg: SamplerConfig,
    ) -> Result<Self> {
        check_discriminator(&cfg, discriminator.as_deref())?;
        let state = init_state(&cfg, &objective.input_shape())?;
        Ok(Self {
            objective,
            discriminator,
            cfg,
            state,
            eval: None,
            revision: 0,
            warning: None,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn objective(&self) -> &Arc<dyn Objective> {
        &self.objective
    }

    pub fn discriminator(&self) -> Option<&Arc<Checkpoint>> {
        self.discriminator.as_ref()
    }

    /// Number of accepted edits since construction.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Replaces the config; takes effect on the next update. The seed and
    /// initialization only matter on the next [`Chain::reset`].
    pub fn set_config(&mut self, cfg: SamplerConfig) -> Result<()> {
        cfg.validate()?;
        check_discriminator(&cfg, self.discriminator.as_deref())?;
        if cfg.burn_in != self.cfg.burn_in {
            self.state.burn_in = BurnInTracker::default();
        }
        self.state.average.set_window(cfg.avg_window);
        if cfg.regularizers != self.cfg.regularizers
            || cfg.activation_weight != self.cfg.activation_weight
        {
            self.eval = None;
        }
        self.cfg = cfg;
        self.revision += 1;
        Ok(())
    }

    /// Retargets the chain without resetting the sample.
    pub fn set_objective(&mut self, objective: Arc<dyn Objective>) -> Result<()> {
        if objective.input_shape() != self.state.x.shape() {
            return Err(LdamError::Shape {
                kind: "objective",
                detail: format!(
                    "input shape {:?} does not match the chain's {:?}",
                    objective.input_shape(),
                    self.state.x.shape()
                ),
            });
        }
        self.objective = objective;
        self.state.burn_in = BurnInTracker::default();
        self.state.average = SampleAverager::new(self.cfg.avg_window);
        self.eval = None;
        self.revision += 1;
        Ok(())
    }

    pub fn set_discriminator(&mut self, d: Option<Arc<Checkpoint>>) -> Result<()> {
        check_discriminator(&self.cfg, d.as_deref())?;
        self.discriminator = d;
        self.eval = None;
        Ok(())
    }

    pub fn set_warning(&mut self, w: Option<String>) {
        self.warning = w;
    }

    /// Fresh `x₀` from the seed; clears burn-in and averages.
    pub fn reset(&mut self) -> Result<()> {
        self.state = init_state(&self.cfg, self.state.x.shape())?;
        self.eval = None;
        Ok(())
    }

    /// Re-draws `x₀` from an explicit seed, keeping the config's seed unchanged.
    pub fn reset_with_seed(&mut self, seed: u64) -> Result<()> {
        let cfg = SamplerConfig {
            seed,
            ..self.cfg.clone()
        };
        self.state = init_state(&cfg, self.state.x.shape())?;
        self.eval = None;
        Ok(())
    }

    fn evaluate(&self, x: &Tensor) -> Result<Evaluation> {
        let cfg = &self.cfg;
        let (activation, grad) = self
            .objective
            .value_grad(x, cfg.activation_weight != 0.0)?;
        let disc_needs_grad = cfg
            .regularizers
            .iter()
            .any(|r| r.kind == RegularizerKind::Discriminator && r.weight != 0.0);
        let (disc_score, disc_grad) = match &self.discriminator {
            Some(d) if disc_needs_grad => {
                let (v, g) = disc_value_grad(x, d)?;
                (Some(v), Some(g))
            }
            Some(d) => (Some(disc_score(d, x)?), None),
            None => (None, None),
        };
        let mut reg_values = Vec::with_capacity(cfg.regularizers.len());
        let mut reg_grads = Vec::with_capacity(cfg.regularizers.len());
        for r in &cfg.regularizers {
            let (v, g) = match r.kind {
                RegularizerKind::Discriminator => (
                    disc_score.expect("discriminator checked at configuration"),
                    disc_grad.clone(),
                ),
                _ => {
                    let (v, g) = r.value_grad(x, None)?;
                    (v, Some(g))
                }
            };
            reg_values.push(v);
            reg_grads.push(if r.weight != 0.0 { g } else { None });
        }
        Ok(Evaluation {
            activation,
            grad,
            reg_values,
            reg_grads,
            disc_score,
        })
    }

    fn current_eval(&mut self) -> Result<&Evaluation> {
        if self.eval.is_none() {
            let e = self.evaluate(&self.state.x)?;
            self.check_eval(&e)?;
            self.eval = Some(e);
        }
        Ok(self.eval.as_ref().expect("just filled"))
    }

    fn check_eval(&self, e: &Evaluation) -> Result<()> {
        let bad = if !e.activation.is_finite() {
            Some("activation")
        } else if e.grad.as_ref().is_some_and(|g| !g.is_finite()) {
            Some("activation gradient")
        } else if e.reg_values.iter().any(|v| !v.is_finite())
            || e.reg_grads.iter().flatten().any(|g| !g.is_finite())
        {
            Some("regularizer")
        } else {
            None
        };
        match bad {
            Some(what) => Err(self.non_finite(what)),
            None => Ok(()),
        }
    }

    fn non_finite(&self, what: &str) -> LdamError {
        LdamError::NonFiniteStep {
            step: self.state.t,
            what: what.to_string(),
            frame: Box::new(self.frame()),
        }
    }

    /// Performs one update and refreshes the evaluation at the new sample.
    pub fn advance(&mut self) -> Result<StepInfo> {
        let cfg = self.cfg.clone();
        let beta = cfg.schedule.beta(self.state.t + 1);
        let normalize = cfg.effective_normalize();
        let n = self.state.x.len();
        let eval = self.current_eval()?.clone();

        // Drift: w·N(∇f) + Σ λ_i N(∇R_i).
        let mut drift = match &eval.grad {
            Some(g) if cfg.activation_weight != 0.0 => {
                scaled(g, cfg.activation_weight, normalize)
            }
            _ => vec![0.0f32; n],
        };
        for (r, g) in cfg.regularizers.iter().zip(&eval.reg_grads) {
            if let Some(g) = g {
                let c = scaled(g, r.weight, normalize);
                for (d, v) in drift.iter_mut().zip(c) {
                    *d += v;
                }
            }
        }

        let state = &mut self.state;
        match cfg.mode {
            SamplerMode::Free => {
                let noise_std = cfg.sigma * cfg.temperature.sqrt();
                if noise_std > 0.0 {
                    for d in drift.iter_mut() {
                        *d += noise_std * state.rng.sample::<f32, _>(StandardNormal);
                    }
                }
                let gamma = cfg.effective_momentum();
                let beta = beta as f32;
                for ((x, v), g) in state
                    .x
                    .data_mut()
                    .iter_mut()
                    .zip(state.v.data_mut())
                    .zip(&drift)
                {
                    *v = gamma * *v + beta * g;
                    *x += *v;
                }
            }
            SamplerMode::Principled => {
                let scale = beta / cfg.temperature as f64;
                let noise_std = (2.0 * beta).sqrt();
                for (x, g) in state.x.data_mut().iter_mut().zip(&drift) {
                    let xi: f64 = state.rng.sample(StandardNormal);
                    *x = (*x as f64 + scale * *g as f64 + noise_std * xi) as f32;
                }
            }
        }
        state.t += 1;
        self.eval = None;
        if !self.state.x.is_finite() {
            return Err(self.non_finite("sample"));
        }
        let e = self.evaluate(&self.state.x)?;
        self.check_eval(&e)?;
        let done = self.state.burn_in.push(e.activation, &cfg.burn_in);
        if done {
            self.state.average.push(&self.state.x);
        }
        let info = StepInfo {
            step: self.state.t,
            activation: e.activation,
            disc_score: e.disc_score,
            burn_in_done: done,
        };
        self.eval = Some(e);
        Ok(info)
    }

    /// One update plus the frame describing the new sample.
    pub fn step(&mut self) -> Result<FrameMessage> {
        self.advance()?;
        Ok(self.frame())
    }

    /// Current activation, if the sample has been evaluated.
    pub fn activation(&self) -> Option<f64> {
        self.eval.as_ref().map(|e| e.activation)
    }

    pub fn disc_score(&self) -> Option<f64> {
        self.eval.as_ref().and_then(|e| e.disc_score)
    }

    /// Evaluates the current sample if needed.
    pub fn refresh(&mut self) -> Result<()> {
        self.current_eval().map(|_| ())
    }

    /// Frame for the current sample. Values are NaN when the sample has not
    /// been evaluated yet.
    pub fn frame(&self) -> FrameMessage {
        let x = &self.state.x;
        let (channels, height, width) = image_dims(x.shape());
        let averaged_display = match self.state.average.mean() {
            Ok(m) => to_display(m.data()),
            Err(_) => vec![128; x.len()],
        };
        let eval = self.eval.as_ref();
        let cfg = &self.cfg;
        FrameMessage {
            step: self.state.t.min(u32::MAX as u64) as u32,
            activation: eval.map_or(f32::NAN, |e| e.activation as f32),
            disc_score: eval.and_then(|e| e.disc_score).map(|v| v as f32),
            burn_in_done: self.state.burn_in.done(),
            channels,
            height,
            width,
            raw: x.data().to_vec(),
            display: to_display(x.data()),
            averaged_display,
            params: Some(FrameParams {
                revision: self.revision,
                neuron: self.objective.neuron(),
                activation_weight: cfg.activation_weight,
                temperature: cfg.temperature,
                sigma: cfg.sigma,
                momentum: cfg.effective_momentum(),
                schedule: Some(cfg.schedule),
                avg_window: cfg.avg_window,
                regularizers: cfg.regularizers.clone(),
                regularizer_values: eval.map_or_else(
                    || vec![f64::NAN; cfg.regularizers.len()],
                    |e| e.reg_values.clone(),
                ),
                warning: self.warning.clone(),
            }),
        }
    }
}

fn check_discriminator(cfg: &SamplerConfig, d: Option<&Checkpoint>) -> Result<()> {
    if cfg.uses_discriminator() && d.is_none() {
        return Err(LdamError::InvalidArgument(
            "discriminator regularizer requires a discriminator model".into(),
        ));
    }
    Ok(())
}

/// `D(x)` without its gradient.
pub fn disc_score(d: &Checkpoint, x: &Tensor) -> Result<f64> {
    let n = NeuronRef {
        layer_index: d.arch.layers.len() - 1,
        unit: 0,
        spatial: None,
        stage: Stage::PreSoftmax,
    };
    Ok(neuron_value_grad(d, x, &n, false)?.0 as f64)
}

/// `w · g`, or `w · g / ‖g‖` when normalizing (zero stays zero).
fn scaled(g: &Tensor, w: f32, normalize: bool) -> Vec<f32> {
    let s = if normalize {
        let norm = g.l2_norm();
        if norm > 0.0 {
            (w as f64 / norm) as f32
        } else {
            0.0
        }
    } else {
        w
    };
    g.data().iter().map(|&v| s * v).collect()
}

fn image_dims(shape: &[usize]) -> (u8, u16, u16) {
    let (c, h, w) = match shape {
        [w] => (1, 1, *w),
        [h, w] => (1, *h, *w),
        [rest @ .., h, w] => (rest.iter().product(), *h, *w),
        [] => (1, 1, 1),
    };
    (c as u8, h as u16, w as u16)
}

/// Deterministic gradient ascent on `f + Σ λ_i R_i` from a seeded Gaussian
/// init with standard deviation [`DEFAULT_INIT_STD`].
pub fn gradient_ascent_am(
    objective: &dyn Objective,
    regs: &[RegularizerSpec],
    steps: usize,
    lr: f32,
    seed: u64,
) -> Result<Tensor> {
    let cfg = SamplerConfig {
        seed,
        ..Default::default()
    };
    let x0 = init_state(&cfg, &objective.input_shape())?.x;
    gradient_ascent_from(objective, regs, x0, steps, lr)
}

/// Plain gradient ascent `x ← x + lr (∇f + Σ λ_i ∇R_i)` from `x0`.
pub fn gradient_ascent_from(
    objective: &dyn Objective,
    regs: &[RegularizerSpec],
    mut x: Tensor,
    steps: usize,
    lr: f32,
) -> Result<Tensor> {
    for r in regs {
        r.validate()?;
        if r.kind == RegularizerKind::Discriminator {
            return Err(LdamError::InvalidArgument(
                "gradient ascent does not support the discriminator regularizer".into(),
            ));
        }
    }
    for step in 0..steps {
        let (_, g) = objective.value_grad(&x, true)?;
        let mut g = g.expect("gradient requested");
        for r in regs {
            if r.weight != 0.0 {
                g.axpy(r.weight, &r.value_grad(&x, None)?.1)?;
            }
        }
        x.axpy(lr, &g)?;
        if !x.is_finite() {
            return Err(LdamError::NonFinite(format!(
                "gradient ascent diverged at step {}",
                step + 1
            )));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{DoubleWell, Quadratic};

    fn quad(d: usize, c: f32, tau: f64) -> Arc<dyn Objective> {
        Arc::new(Quadratic {
            center: Tensor::full(&[d], c),
            tau,
        })
    }

    #[test]
    fn schedule_follows_the_power_law() {
        let s = StepSchedule {
            a: 1.0,
            b: 0.0,
            mu: 1.0,
        };
        assert_eq!(s.beta(4), 0.25);
        assert!((s.beta(3) - 1.0 / 3.0).abs() < 1e-15);
        // a chain that has completed 3 updates takes its next step with β = 0.25
        let cfg = SamplerConfig {
            schedule: s,
            sigma: 0.0,
            momentum: 0.0,
            normalize_gradients: false,
            ..Default::default()
        };
        let mut chain = Chain::new(quad(1, 0.0, 1.0), None, cfg).unwrap();
        for _ in 0..3 {
            chain.advance().unwrap();
        }
        let x3 = chain.state().x.data()[0];
        chain.advance().unwrap();
        assert_eq!(chain.state().x.data()[0], x3 + 0.25 * -x3);
        assert_eq!(StepSchedule::constant(0.01).beta(1000), 0.01);
    }

    #[test]
    fn principled_mode_restricts_mu() {
        let mut cfg = SamplerConfig {
            mode: SamplerMode::Principled,
            ..Default::default()
        };
        cfg.schedule.mu = 0.4;
        assert!(cfg.validate().is_err());
        cfg.schedule.mu = 0.0;
        assert!(cfg.validate().is_ok());
        cfg.schedule.mu = 1.0;
        assert!(cfg.validate().is_ok());
        cfg.mode = SamplerMode::Free;
        cfg.schedule.mu = 0.4;
        assert!(cfg.validate().is_ok());
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_state_is_seeded_gaussian() {
        let cfg = SamplerConfig {
            seed: 9,
            init_std: 0.3,
            ..Default::default()
        };
        let a = init_state(&cfg, &[100, 100]).unwrap();
        let b = init_state(&cfg, &[100, 100]).unwrap();
        assert_eq!(a.x, b.x);
        assert!(a.v.data().iter().all(|&v| v == 0.0));
        let std = (a.x.dot(&a.x).unwrap() / 1e4).sqrt();
        assert!((std - 0.3).abs() < 0.015, "std {std}");
    }

    #[test]
    fn display_normalization() {
        assert!(to_display(&[0.0; 5]).iter().all(|&p| p == 128));
        assert_eq!(to_display(&[2.0, -2.0, 0.0, 1.0]), vec![255, 1, 128, 192]);
        assert_eq!(to_display(&[-1e-30, 5.0]), vec![128, 255]);
    }

    #[test]
    fn burn_in_rules() {
        let cfg = BurnInConfig {
            window: 10,
            threshold: 0.9,
            stability: 0.05,
        };
        let mut t = BurnInTracker::default();
        for i in 0..9 {
            assert!(!t.push(3.0, &cfg), "fired early at {i}");
        }
        assert!(t.push(3.0, &cfg));
        assert!(t.push(-100.0, &cfg), "stays fired");

        let mut t = BurnInTracker::default();
        for i in 0..200 {
            assert!(!t.push(1.2f64.powi(i), &cfg));
        }

        // a negative plateau is handled without sign flips
        let mut t = BurnInTracker::default();
        for _ in 0..10 {
            t.push(-50.0, &cfg);
        }
        assert!(t.done());
    }

    #[test]
    fn averaging_window() {
        let mut a = SampleAverager::new(2);
        assert!(matches!(a.mean(), Err(LdamError::NoSamples)));
        let x = Tensor::from_vec(vec![1.0, -2.0]);
        a.push(&x);
        assert_eq!(a.mean().unwrap(), x);
        a.push(&x.scale(-1.0));
        assert!(a.mean().unwrap().data().iter().all(|&v| v == 0.0));
        a.push(&Tensor::from_vec(vec![3.0, 3.0]));
        assert_eq!(a.mean().unwrap().data(), &[1.0, 2.5]);
        assert_eq!(a.count(), 2);
    }

    #[test]
    fn streaming_mean_matches_batch_mean() {
        let mut a = SampleAverager::new(50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Tensor> = (0..500)
            .map(|_| {
                Tensor::from_vec((0..16).map(|_| rng.random_range(-10.0..10.0)).collect())
            })
            .collect();
        for f in &frames {
            a.push(f);
        }
        let tail = &frames[450..];
        let mut want = Tensor::zeros(&[16]);
        for f in tail {
            want.axpy(1.0 / 50.0, f).unwrap();
        }
        let got = a.mean().unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn free_mode_without_noise_is_momentum_ascent() {
        let cfg = SamplerConfig {
            sigma: 0.0,
            normalize_gradients: false,
            seed: 4,
            ..Default::default()
        };
        let obj = quad(8, 1.0, 1.0);
        let mut chain = Chain::new(obj.clone(), None, cfg.clone()).unwrap();
        let mut x = init_state(&cfg, &[8]).unwrap().x;
        let mut v = Tensor::zeros(&[8]);
        for t in 1..=200u64 {
            chain.advance().unwrap();
            let g = obj.value_grad(&x, true).unwrap().1.unwrap();
            let beta = cfg.schedule.beta(t) as f32;
            for ((xi, vi), gi) in x.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = cfg.momentum * *vi + beta * gi;
                *xi += *vi;
            }
            assert_eq!(chain.state().x, x);
        }
    }

    #[test]
    fn chains_replay_bit_identically() {
        let cfg = SamplerConfig {
            seed: 11,
            ..Default::default()
        };
        let run = || {
            let mut c = Chain::new(quad(5, 0.5, 1.0), None, cfg.clone()).unwrap();
            (0..50).map(|_| c.step().unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.encode().unwrap(), fb.encode().unwrap());
        }
        assert_eq!(a[0].step, 1);
    }

    #[test]
    fn reset_restarts_the_trajectory() {
        let mut c = Chain::new(quad(5, 0.5, 1.0), None, SamplerConfig::default()).unwrap();
        let first = c.step().unwrap();
        c.step().unwrap();
        c.reset().unwrap();
        let again = c.step().unwrap();
        assert_eq!(again.step, 1);
        assert!(!again.burn_in_done);
        assert_eq!(again.raw, first.raw);
    }

    #[test]
    fn principled_mode_is_stationary_on_a_quadratic() {
        let d = 16;
        let cfg = SamplerConfig {
            mode: SamplerMode::Principled,
            temperature: 1.0,
            schedule: StepSchedule::constant(1e-3),
            seed: 1,
            ..Default::default()
        };
        let mut c = Chain::new(quad(d, 1.5, 1.0), None, cfg).unwrap();
        for _ in 0..10_000 {
            c.advance().unwrap();
        }
        let stats = collect_moments(&mut c, 200_000, 20);
        for (mean, se) in &stats.means {
            assert!((mean - 1.5).abs() <= 3.0 * se, "mean {mean} se {se}");
        }
        assert!((stats.pooled_var - 1.0).abs() <= 0.1, "var {}", stats.pooled_var);
    }

    struct Moments {
        means: Vec<(f64, f64)>,
        pooled_var: f64,
    }

    fn collect_moments(c: &mut Chain, steps: usize, batches: usize) -> Moments {
        let d = c.state().x.len();
        let per = steps / batches;
        let mut batch_means = vec![vec![0.0f64; d]; batches];
        let mut sum = vec![0.0f64; d];
        let mut sum_sq = vec![0.0f64; d];
        for bm in batch_means.iter_mut() {
            for _ in 0..per {
                c.advance().unwrap();
                for (i, &x) in c.state().x.data().iter().enumerate() {
                    let x = x as f64;
                    bm[i] += x / per as f64;
                    sum[i] += x;
                    sum_sq[i] += x * x;
                }
            }
        }
        let n = (per * batches) as f64;
        let mut means = Vec::new();
        let mut var = 0.0;
        for i in 0..d {
            let m = sum[i] / n;
            var += sum_sq[i] / n - m * m;
            let bv = batch_means.iter().map(|b| (b[i] - m).powi(2)).sum::<f64>()
                / (batches - 1) as f64;
            means.push((m, (bv / batches as f64).sqrt()));
        }
        Moments {
            means,
            pooled_var: var / d as f64,
        }
    }

    #[test]
    fn burn_in_fires_on_the_quadratic() {
        let cfg = SamplerConfig {
            mode: SamplerMode::Principled,
            schedule: StepSchedule::constant(1e-3),
            seed: 2,
            ..Default::default()
        };
        let mut c = Chain::new(quad(1024, 1.0, 1.0), None, cfg).unwrap();
        let fired = (0..50_000).any(|_| c.advance().unwrap().burn_in_done);
        assert!(fired, "burn-in did not fire within 5e4 steps");
    }

    #[test]
    fn gradient_ascent_picks_one_basin() {
        let dw = DoubleWell {
            m1: Tensor::from_vec(vec![-2.0, 0.0]),
            m2: Tensor::from_vec(vec![2.0, 0.0]),
            s: 1.0,
        };
        let x0 = gradient_ascent_am(&dw, &[], 0, 0.1, 3).unwrap();
        let init = init_state(
            &SamplerConfig {
                seed: 3,
                ..Default::default()
            },
            &[2],
        )
        .unwrap();
        assert_eq!(x0, init.x);
        let x = gradient_ascent_from(&dw, &[], Tensor::from_vec(vec![0.5, 0.3]), 500, 0.1).unwrap();
        // the far well pulls the fixed point slightly off m2
        assert!(x.sub(&dw.m2).unwrap().l2_norm() < 1e-2);
        assert_eq!(dw.basin(&x), 1);
        let f0 = dw.value_grad(&Tensor::from_vec(vec![0.5, 0.3]), false).unwrap().0;
        assert!(dw.value_grad(&x, false).unwrap().0 >= f0);
    }

    #[test]
    fn non_finite_gradients_are_reported_with_a_frame() {
        let cfg = SamplerConfig {
            sigma: 0.0,
            normalize_gradients: false,
            schedule: StepSchedule::constant(1e30),
            ..Default::default()
        };
        let mut c = Chain::new(quad(4, 1e30, 1e-30), None, cfg).unwrap();
        let err = (0..5).find_map(|_| c.advance().err()).expect("must fail");
        match err {
            LdamError::NonFiniteStep { frame, .. } => assert_eq!(frame.raw.len(), 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn discriminator_regularizer_needs_a_model() {
        let cfg = SamplerConfig {
            regularizers: vec![RegularizerSpec {
                kind: RegularizerKind::Discriminator,
                weight: 1.0,
            }],
            ..Default::default()
        };
        assert!(Chain::new(quad(4, 0.0, 1.0), None, cfg).is_err());
    }

    #[test]
    fn edits_bump_the_revision_and_show_in_frames() {
        let mut c = Chain::new(quad(4, 0.0, 1.0), None, SamplerConfig::default()).unwrap();
        let mut cfg = c.config().clone();
        cfg.regularizers.push(RegularizerSpec {
            kind: RegularizerKind::L2,
            weight: 0.3,
        });
        c.set_config(cfg).unwrap();
        let f = c.step().unwrap();
        let p = f.params.unwrap();
        assert_eq!(p.revision, 1);
        assert_eq!(p.regularizers[0].weight, 0.3);
        let x = Tensor::new(vec![4], f.raw.clone()).unwrap();
        assert!((p.regularizer_values[0] + 0.5 * x.dot(&x).unwrap()).abs() < 1e-6);
    }
}
