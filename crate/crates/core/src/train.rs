//! Classifier training, evaluation, and the discriminator update step.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;

use crate::dataset::{batch_iter, LabeledDataset};
use crate::error::{shape_err, LdamError, Result};
use crate::layers::{sigmoid_bce_with_logits, softmax_cross_entropy};
use crate::model::{build_lenet, Checkpoint, RunningParamMean};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    pub seed: u64,
    /// Average parameters over the epochs after this one (so `5` of `10`
    /// averages the snapshots ending epochs 6 through 10).
    pub param_avg_start_epoch: Option<usize>,
    /// Snapshot cadence in optimizer steps inside the averaging window;
    /// `None` snapshots once per epoch end.
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            optimizer: RmsPropConfig::default(),
            seed: 0,
            param_avg_start_epoch: Some(5),
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let positive = [o.lr, o.rho, o.momentum, o.eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || o.rho >= 1.0 || o.momentum >= 1.0
        {
            return Err(LdamError::InvalidArgument(format!(
                "optimizer rates must be positive (rho, momentum < 1): {o:?}"
            )));
        }
        if self.batch_size == 0 {
            return Err(LdamError::InvalidArgument("batch size must be positive".into()));
        }
        if let Some(s) = self.param_avg_start_epoch {
            if s > self.epochs {
                return Err(LdamError::InvalidArgument(format!(
                    "param_avg_start_epoch {s} exceeds epochs {}",
                    self.epochs
                )));
            }
        }
        if self.snapshot_every == Some(0) {
            return Err(LdamError::InvalidArgument("snapshot_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub averaged_test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub base: Checkpoint,
    pub averaged: Option<Checkpoint>,
    pub snapshots: Vec<Checkpoint>,
}

impl TrainOutput {
    /// Writes `<prefix>.ckpt`, `<prefix>-avg.ckpt` (when averaging ran) and
    /// `<prefix>-snapshot-NN.ckpt`, returning the paths in that order.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut put = |name: String, ckpt: &Checkpoint| -> Result<()> {
            let p = dir.join(name);
            save_checkpoint(ckpt, &p)?;
            written.push(p);
            Ok(())
        };
        put(format!("{prefix}.ckpt"), &self.base)?;
        if let Some(avg) = &self.averaged {
            put(format!("{prefix}-avg.ckpt"), avg)?;
        }
        for (i, s) in self.snapshots.iter().enumerate() {
            put(format!("{prefix}-snapshot-{:02}.ckpt", i + 1), s)?;
        }
        Ok(written)
    }
}

pub fn train_classifier(cfg: &TrainConfig, ds: &LabeledDataset) -> Result<TrainOutput> {
    train_classifier_with(cfg, ds, None, |_| {})
}

/// Trains a LeNet from `build_lenet(cfg.seed)`; `progress` is called after each epoch.
pub fn train_classifier_with(
    cfg: &TrainConfig,
    ds: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    mut progress: impl FnMut(&EpochReport),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut model = build_lenet(cfg.seed);
    model.meta.optimizer = cfg.optimizer.describe();
    let mut opt = RmsProp::new(cfg.optimizer, &model.params);
    let logits_end = model.arch.logits_layer() + 1;
    let mut running: Option<RunningParamMean> = None;
    let mut snapshots = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let averaging = cfg.param_avg_start_epoch.is_some_and(|s| epoch > s);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (images, labels) in batch_iter(ds, cfg.batch_size.min(ds.len()), epoch_seed(cfg.seed, epoch))? {
            let trace = model.forward_trace(&images, logits_end)?;
            let logits = trace.outputs.last().expect("non-empty model");
            let (loss, grad) = softmax_cross_entropy(logits, &labels)?;
            if !loss.is_finite() {
                return Err(LdamError::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(model),
                });
            }
            correct += count_correct(logits, &labels);
            loss_sum += loss * labels.len() as f64;
            let (_, grads) = model.backward(&trace, grad, true)?;
            opt.step(&mut model.params, &grads)?;
            step += 1;
            if averaging && cfg.snapshot_every.is_some_and(|k| step % k == 0) {
                record_snapshot(&model, epoch, &mut running, &mut snapshots)?;
            }
        }
        model.meta.epoch = epoch;
        if averaging && cfg.snapshot_every.is_none() {
            record_snapshot(&model, epoch, &mut running, &mut snapshots)?;
        }
        let test_accuracy = eval.map(|e| evaluate(&model, e)).transpose()?;
        let averaged_test_accuracy = match (eval, &running) {
            (Some(e), Some(r)) => Some(evaluate(&r.to_checkpoint(), e)?),
            _ => None,
        };
        progress(&EpochReport {
            epoch,
            loss: loss_sum / ds.len() as f64,
            train_accuracy: correct as f64 / ds.len() as f64,
            test_accuracy,
            averaged_test_accuracy,
        });
    }

    if let Some(e) = eval {
        model.meta.accuracy = Some(evaluate(&model, e)?);
    }
    let averaged = match running {
        Some(r) => {
            let mut avg = r.to_checkpoint();
            avg.meta.epoch = cfg.epochs;
            avg.meta.averaged_from_epoch = cfg.param_avg_start_epoch.map(|s| s + 1);
            if let Some(e) = eval {
                avg.meta.accuracy = Some(evaluate(&avg, e)?);
            }
            Some(avg)
        }
        None => None,
    };
    Ok(TrainOutput {
        base: model,
        averaged,
        snapshots,
    })
}

fn record_snapshot(
    model: &Checkpoint,
    epoch: usize,
    running: &mut Option<RunningParamMean>,
    snapshots: &mut Vec<Checkpoint>,
) -> Result<()> {
    let mut snap = model.clone();
    snap.meta.epoch = epoch;
    match running {
        Some(r) => r.push(&snap)?,
        None => *running = Some(RunningParamMean::new(&snap)),
    }
    snapshots.push(snap);
    Ok(())
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn count_correct(logits: &Tensor, labels: &[u8]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y as usize)
        .count()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(ckpt: &Checkpoint, ds: &LabeledDataset) -> Result<f64> {
    Ok(predictions(ckpt, ds)?
        .iter()
        .zip(ds.labels())
        .filter(|(p, &y)| **p == y as usize)
        .count() as f64
        / ds.len() as f64)
}

/// Argmax class for every item, computed in chunks.
pub fn predictions(ckpt: &Checkpoint, ds: &LabeledDataset) -> Result<Vec<usize>> {
    const CHUNK: usize = 500;
    let mut out = Vec::with_capacity(ds.len());
    let mut start = 0;
    while start < ds.len() {
        let n = CHUNK.min(ds.len() - start);
        let logits = ckpt.logits(&ds.images().rows(start, n)?)?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(argmax));
        start += n;
    }
    Ok(out)
}

/// Accuracy of the mean predicted distribution over `snapshots`.
pub fn evaluate_ensemble(snapshots: &[Checkpoint], ds: &LabeledDataset) -> Result<f64> {
    const CHUNK: usize = 500;
    let mut correct = 0;
    let mut start = 0;
    while start < ds.len() {
        let n = CHUNK.min(ds.len() - start);
        let probs = crate::model::ensemble_predict(snapshots, &ds.images().rows(start, n)?)?;
        let k = probs.shape()[1];
        correct += probs
            .data()
            .chunks(k)
            .zip(&ds.labels()[start..start + n])
            .filter(|(row, &y)| argmax(row) == y as usize)
            .count();
        start += n;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Binary cross-entropy loss of `disc` on generated (label 0) and real (label 1) images.
pub fn discriminator_loss(disc: &Checkpoint, fake: &Tensor, real: &Tensor) -> Result<f64> {
    let (batch, targets) = disc_batch(disc, fake, real)?;
    let logits = disc.logits(&batch)?;
    Ok(sigmoid_bce_with_logits(&logits, &targets)?.0)
}

/// One gradient-descent step of binary cross-entropy on the combined batch
/// `[fake (label 0); real (label 1)]`.
pub fn discriminator_update(
    disc: &Checkpoint,
    fake: &Tensor,
    real: &Tensor,
    lr: f32,
) -> Result<Checkpoint> {
    let (batch, targets) = disc_batch(disc, fake, real)?;
    let trace = disc.forward_trace(&batch, disc.arch.logits_layer() + 1)?;
    let (loss, grad) = sigmoid_bce_with_logits(trace.outputs.last().expect("layers"), &targets)?;
    if !loss.is_finite() {
        return Err(LdamError::NonFinite(format!("discriminator loss {loss}")));
    }
    let (_, grads) = disc.backward(&trace, grad, true)?;
    let mut next = disc.clone();
    if lr != 0.0 {
        let update: Vec<Vec<Tensor>> = grads
            .iter()
            .map(|g| g.iter().map(|t| t.scale(lr)).collect())
            .collect();
        next.apply_update(&update)?;
    }
    Ok(next)
}

fn disc_batch(disc: &Checkpoint, fake: &Tensor, real: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let fake = disc.batched(fake)?;
    let real = disc.batched(real)?;
    if fake.batch() != real.batch() {
        return Err(shape_err(
            "discriminator batch",
            format!("{} generated vs {} real samples", fake.batch(), real.batch()),
        ));
    }
    let mut targets = vec![0.0f32; fake.batch()];
    targets.extend(std::iter::repeat_n(1.0f32, real.batch()));
    Ok((Tensor::concat_rows(&fake, &real)?, targets))
}
