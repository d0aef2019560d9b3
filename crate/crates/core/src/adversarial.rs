//! Sampling against a discriminator that is retrained on the samples it rejects.
//!
//! Each outer iteration draws a fresh `x₀`, runs the chain with the
//! discriminator as a regularizer until `D(x) > escape_threshold` (or a step
//! cap), then takes one discriminator step on the last generated samples
//! (label 0) against as many real images (label 1).

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{LdamError, Result};
use crate::frame::FrameMessage;
use crate::model::Checkpoint;
use crate::regularizers::RegularizerKind;
use crate::sampler::{disc_score, Chain, SamplerConfig, StepInfo};
use crate::targets::Objective;
use crate::tensor::Tensor;
use crate::train::discriminator_update;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialConfig {
    pub escape_threshold: f64,
    pub step_cap: usize,
    /// Generated samples per discriminator update (matched by real ones).
    pub half_batch: usize,
    pub disc_lr: f32,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            escape_threshold: 0.9,
            step_cap: 5000,
            half_batch: 16,
            disc_lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterReport {
    pub iteration: usize,
    pub steps: usize,
    pub escaped: bool,
    pub final_score: f64,
    /// `D` loss on the update batch before the update.
    pub disc_loss: f64,
    pub warning: Option<String>,
}

/// What the per-step callback wants next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

pub struct AdversarialLoop {
    chain: Chain,
    disc: Arc<Checkpoint>,
    real: Arc<LabeledDataset>,
    cfg: AdversarialConfig,
    rng: ChaCha8Rng,
    iteration: usize,
    total_steps: u64,
    /// Steps taken in the current outer iteration; 0 before its first step.
    inner_steps: usize,
    recent: VecDeque<Tensor>,
}

impl AdversarialLoop {
    pub fn new(
        objective: Arc<dyn Objective>,
        disc: Checkpoint,
        real: Arc<LabeledDataset>,
        sampler: SamplerConfig,
        cfg: AdversarialConfig,
    ) -> Result<Self> {
        check_sampler(&sampler)?;
        if cfg.half_batch == 0 || cfg.step_cap == 0 {
            return Err(LdamError::InvalidArgument(
                "half_batch and step_cap must be positive".into(),
            ));
        }
        if !(cfg.escape_threshold > 0.0 && cfg.escape_threshold < 1.0) {
            return Err(LdamError::InvalidArgument(format!(
                "escape_threshold must lie in (0, 1), got {}",
                cfg.escape_threshold
            )));
        }
        if !(cfg.disc_lr.is_finite() && cfg.disc_lr >= 0.0) {
            return Err(LdamError::InvalidArgument(format!(
                "disc_lr must be >= 0, got {}",
                cfg.disc_lr
            )));
        }
        if real.is_empty() {
            return Err(LdamError::InvalidArgument("no real images".into()));
        }
        let disc = Arc::new(disc);
        let chain = Chain::new(objective, Some(disc.clone()), sampler)?;
        Ok(Self {
            chain,
            disc,
            real,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            iteration: 0,
            total_steps: 0,
            inner_steps: 0,
            recent: VecDeque::new(),
        })
    }

    pub fn config(&self) -> &AdversarialConfig {
        &self.cfg
    }

    pub fn discriminator(&self) -> &Checkpoint {
        &self.disc
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    /// Completed outer iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Steps taken across all outer iterations.
    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Steps taken so far in the current outer iteration.
    pub fn inner_steps(&self) -> usize {
        self.inner_steps
    }

    /// Replaces the sampler settings; the discriminator term must stay.
    pub fn set_sampler_config(&mut self, cfg: SamplerConfig) -> Result<()> {
        check_sampler(&cfg)?;
        self.chain.set_config(cfg)
    }

    pub fn set_objective(&mut self, objective: Arc<dyn Objective>) -> Result<()> {
        self.chain.set_objective(objective)
    }

    /// Abandons the current outer iteration without a discriminator update;
    /// the next step starts it again from its initial sample.
    pub fn restart_iteration(&mut self) {
        self.inner_steps = 0;
        self.recent.clear();
    }

    /// Current frame, stamped with the global step counter.
    pub fn frame(&self) -> FrameMessage {
        let mut f = self.chain.frame();
        f.step = self.total_steps.min(u32::MAX as u64) as u32;
        f
    }

    /// Takes one inner step. When the sample escapes (`D(x)` above the
    /// threshold) or the step cap is reached, the discriminator is updated
    /// and the report of the finished outer iteration is returned; the next
    /// step then starts a new iteration from a fresh `x₀`.
    pub fn step(&mut self) -> Result<(StepInfo, Option<OuterReport>)> {
        if self.inner_steps == 0 {
            let seed = self.cfg.seed
                ^ (self.iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            self.chain.reset_with_seed(seed)?;
            self.chain.set_warning(None);
            self.recent.clear();
        }
        let info = self.chain.advance()?;
        self.inner_steps += 1;
        self.total_steps += 1;
        if self.recent.len() == self.cfg.half_batch {
            self.recent.pop_front();
        }
        self.recent.push_back(self.chain.state().x.clone());
        let score = info.disc_score.unwrap_or(f64::NAN);
        let escaped = score > self.cfg.escape_threshold;
        if !escaped && self.inner_steps < self.cfg.step_cap {
            return Ok((info, None));
        }
        let report = self.finish(escaped, score)?;
        Ok((info, Some(report)))
    }

    fn finish(&mut self, escaped: bool, score: f64) -> Result<OuterReport> {
        let warning = (!escaped).then(|| {
            format!(
                "step cap {} reached with D(x) = {score:.3}",
                self.cfg.step_cap
            )
        });
        self.chain.set_warning(warning.clone());
        let fake = Tensor::stack(self.recent.make_contiguous())?;
        let idx: Vec<usize> = (0..self.recent.len())
            .map(|_| self.rng.random_range(0..self.real.len()))
            .collect();
        let real = self.real.images().gather_rows(&idx)?;
        let disc_loss = crate::train::discriminator_loss(&self.disc, &fake, &real)?;
        let next = discriminator_update(&self.disc, &fake, &real, self.cfg.disc_lr)?;
        self.disc = Arc::new(next);
        self.chain.set_discriminator(Some(self.disc.clone()))?;
        let report = OuterReport {
            iteration: self.iteration,
            steps: self.inner_steps,
            escaped,
            final_score: score,
            disc_loss,
            warning,
        };
        self.iteration += 1;
        self.inner_steps = 0;
        self.recent.clear();
        Ok(report)
    }

    /// Runs the current outer iteration to completion. `on_step` sees every
    /// inner step and may stop early; unless that step happened to finish the
    /// iteration, `None` is returned and the next call resumes it.
    pub fn run_outer(
        &mut self,
        mut on_step: impl FnMut(&StepInfo, &Self) -> Flow,
    ) -> Result<Option<OuterReport>> {
        loop {
            let (info, report) = self.step()?;
            if on_step(&info, self) == Flow::Stop {
                return Ok(report);
            }
            if report.is_some() {
                return Ok(report);
            }
        }
    }
}

fn check_sampler(sampler: &SamplerConfig) -> Result<()> {
    if !sampler
        .regularizers
        .iter()
        .any(|r| r.kind == RegularizerKind::Discriminator)
    {
        return Err(LdamError::InvalidArgument(
            "the sampler config needs a discriminator regularizer".into(),
        ));
    }
    Ok(())
}

/// Warm-start length that leaves `D` confident on real images without saturating.
pub const DEFAULT_PRETRAIN_STEPS: usize = 100;

/// Trains `D` to tell real images from Gaussian noise images of std `noise_std`.
pub fn pretrain_discriminator(
    disc: &Checkpoint,
    real: &LabeledDataset,
    steps: usize,
    half_batch: usize,
    lr: f32,
    noise_std: f32,
    seed: u64,
) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = disc.clone();
    let shape = real.images().shape()[1..].to_vec();
    let per: usize = shape.iter().product();
    for _ in 0..steps {
        let idx: Vec<usize> = (0..half_batch)
            .map(|_| rng.random_range(0..real.len()))
            .collect();
        let r = real.images().gather_rows(&idx)?;
        let mut fshape = vec![half_batch];
        fshape.extend_from_slice(&shape);
        let fake = Tensor::new(
            fshape,
            (0..half_batch * per)
                .map(|_| noise_std * rng.sample::<f32, _>(StandardNormal))
                .collect(),
        )?;
        d = discriminator_update(&d, &fake, &r, lr)?;
    }
    Ok(d)
}

/// Mean `D(x)` over a batch of images.
pub fn mean_disc_score(disc: &Checkpoint, images: &Tensor) -> Result<f64> {
    let n = images.batch();
    let mut total = 0.0;
    for i in 0..n {
        let x = images.rows(i, 1)?;
        let x = x.reshape(&images.shape()[1..])?;
        total += disc_score(disc, &x)?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_discriminator, build_lenet, NeuronRef};
    use crate::regularizers::RegularizerSpec;
    use crate::sampler::SamplerMode;
    use crate::targets::NeuronObjective;

    fn toy_real(n: usize) -> LabeledDataset {
        // bright square in the middle of a dark image
        let mut data = vec![0.0f32; n * 28 * 28];
        for k in 0..n {
            for r in 10..18 {
                for c in 10..18 {
                    data[k * 784 + r * 28 + c] = 1.0;
                }
            }
        }
        LabeledDataset::new(Tensor::new(vec![n, 1, 28, 28], data).unwrap(), vec![0; n]).unwrap()
    }

    #[test]
    fn outer_iterations_update_the_discriminator() {
        let model = Arc::new(build_lenet(0));
        let obj = Arc::new(NeuronObjective::new(model.clone(), NeuronRef::output(&model.arch, 3)).unwrap());
        let sampler = SamplerConfig {
            mode: SamplerMode::Free,
            activation_weight: 0.0,
            regularizers: vec![RegularizerSpec {
                kind: RegularizerKind::Discriminator,
                weight: 1.0,
            }],
            ..Default::default()
        };
        let cfg = AdversarialConfig {
            step_cap: 20,
            half_batch: 4,
            ..Default::default()
        };
        let mut lp = AdversarialLoop::new(obj, build_discriminator(1), Arc::new(toy_real(8)), sampler, cfg).unwrap();
        let before = lp.discriminator().params.clone();
        let mut seen = 0;
        let r = lp
            .run_outer(|info, _| {
                seen += 1;
                assert!(info.disc_score.is_some());
                Flow::Continue
            })
            .unwrap()
            .unwrap();
        assert_eq!(seen, r.steps);
        assert!(r.steps <= 20);
        assert_eq!(r.escaped, r.warning.is_none());
        assert_ne!(lp.discriminator().params, before);
        assert_eq!(lp.total_steps(), r.steps as u64);
        assert_eq!(lp.frame().step as usize, r.steps);

        let stopped = lp.run_outer(|_, _| Flow::Stop).unwrap();
        assert!(stopped.is_none());
        assert_eq!(lp.inner_steps(), 1);
    }

    fn small_loop(seed: u64) -> AdversarialLoop {
        let model = Arc::new(build_lenet(0));
        let obj = Arc::new(NeuronObjective::new(model.clone(), NeuronRef::output(&model.arch, 3)).unwrap());
        let sampler = SamplerConfig {
            regularizers: vec![RegularizerSpec {
                kind: RegularizerKind::Discriminator,
                weight: 1.0,
            }],
            ..Default::default()
        };
        let cfg = AdversarialConfig {
            step_cap: 7,
            half_batch: 3,
            seed,
            ..Default::default()
        };
        AdversarialLoop::new(obj, build_discriminator(1), Arc::new(toy_real(8)), sampler, cfg).unwrap()
    }

    #[test]
    fn interrupted_iterations_resume_where_they_stopped() {
        let mut whole = small_loop(5);
        for _ in 0..3 {
            whole.run_outer(|_, _| Flow::Continue).unwrap().unwrap();
        }
        let mut pieces = small_loop(5);
        let mut finished = 0;
        let mut n = 0;
        while finished < 3 {
            // stop every other step, then resume
            if pieces
                .run_outer(|_, _| {
                    n += 1;
                    if n % 2 == 0 { Flow::Stop } else { Flow::Continue }
                })
                .unwrap()
                .is_some()
            {
                finished += 1;
            }
        }
        assert_eq!(whole.total_steps(), pieces.total_steps());
        assert_eq!(whole.discriminator().params, pieces.discriminator().params);
        assert_eq!(whole.frame().encode().unwrap(), pieces.frame().encode().unwrap());
    }

    #[test]
    fn restarting_an_iteration_skips_the_update() {
        let mut lp = small_loop(6);
        let before = lp.discriminator().params.clone();
        lp.step().unwrap();
        lp.step().unwrap();
        lp.restart_iteration();
        assert_eq!(lp.inner_steps(), 0);
        assert_eq!(lp.iteration(), 0);
        assert_eq!(lp.discriminator().params, before);
        let (first, _) = lp.step().unwrap();
        let mut fresh = small_loop(6);
        let (again, _) = fresh.step().unwrap();
        assert_eq!(first.activation, again.activation);
    }

    #[test]
    fn the_discriminator_term_cannot_be_dropped() {
        let mut lp = small_loop(7);
        let cfg = SamplerConfig::default();
        assert!(lp.set_sampler_config(cfg).is_err());
        assert!(AdversarialLoop::new(
            lp.chain().objective().clone(),
            build_discriminator(0),
            Arc::new(toy_real(2)),
            lp.chain().config().clone(),
            AdversarialConfig { escape_threshold: 1.5, ..Default::default() },
        )
        .is_err());
    }

    #[test]
    fn pretraining_separates_real_from_noise() {
        let real = toy_real(16);
        let d = pretrain_discriminator(&build_discriminator(2), &real, 60, 8, 0.05, 0.1, 3).unwrap();
        let noise = Tensor::new(
            vec![4, 1, 28, 28],
            (0..4 * 784).map(|i| ((i * 7919) % 13) as f32 / 130.0 - 0.05).collect(),
        )
        .unwrap();
        let on_real = mean_disc_score(&d, &real.images().rows(0, 4).unwrap()).unwrap();
        let on_noise = mean_disc_score(&d, &noise).unwrap();
        assert!(on_real > 0.7 && on_noise < 0.3, "real {on_real} noise {on_noise}");
    }
}
