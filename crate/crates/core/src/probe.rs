//! Checks that L2-regularized maximization of a first-layer convolution
//! neuron recovers that neuron's kernel.
//!
//! For a pre-activation conv neuron `f(x) = k·patch(x) + b` the objective
//! `f(x) - ½λ‖x‖²` has the unique maximizer `x* = k/λ` inside the receptive
//! field and 0 elsewhere, and its Gibbs density is `N(x*, (T/λ) I)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LdamError, Result};
use crate::gradcheck::max_relative_error;
use crate::layers::LayerSpec;
use crate::model::{Checkpoint, NeuronRef, Stage};
use crate::regularizers::{RegularizerKind, RegularizerSpec};
use crate::sampler::{gradient_ascent_am, Chain, SamplerConfig, SamplerMode, StepSchedule};
use crate::targets::NeuronObjective;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lambda: f32,
    /// Output position of the probed neuron.
    pub position: (usize, usize),
    pub ascent_steps: usize,
    pub ascent_lr: f32,
    pub temperature: f32,
    /// Sampler step as a fraction of the stable limit `T/λ`.
    pub step_fraction: f64,
    pub max_sampler_steps: usize,
    pub avg_window: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            position: (12, 12),
            ascent_steps: 2000,
            ascent_lr: 0.1,
            temperature: 1e-3,
            step_fraction: 0.1,
            max_sampler_steps: 20_000,
            avg_window: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelProbe {
    pub channel: usize,
    /// Max relative error between the ascent fixed point and `k/λ`.
    pub ascent_relative_error: f64,
    /// Cosine similarity of the post-burn-in sample average to `k` inside the
    /// receptive field. `None` if burn-in never completed.
    pub sample_cosine: Option<f64>,
    pub sampler_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub lambda: f32,
    pub position: (usize, usize),
    pub kernels: Vec<KernelProbe>,
}

struct ConvGeometry {
    channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
}

fn first_conv(model: &Checkpoint) -> Result<ConvGeometry> {
    match model.arch.layers.first() {
        Some(LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            padding: crate::layers::Padding::Valid,
        }) => Ok(ConvGeometry {
            channels: *out_channels,
            in_channels: *in_channels,
            kh: *kernel_h,
            kw: *kernel_w,
        }),
        _ => Err(LdamError::InvalidArgument(
            "the model's first layer must be a valid-padding convolution".into(),
        )),
    }
}

/// Kernel of `channel` embedded in a zero image at the receptive field of `pos`.
fn embedded_kernel(model: &Checkpoint, g: &ConvGeometry, channel: usize, pos: (usize, usize)) -> Result<Tensor> {
    let shape = model.arch.input_shape.clone();
    let (h, w) = (shape[1], shape[2]);
    let k = &model.params[0][0];
    let per = g.in_channels * g.kh * g.kw;
    let src = &k.data()[channel * per..(channel + 1) * per];
    let mut img = Tensor::zeros(&shape);
    let d = img.data_mut();
    for c in 0..g.in_channels {
        for r in 0..g.kh {
            for s in 0..g.kw {
                d[c * h * w + (pos.0 + r) * w + pos.1 + s] = src[(c * g.kh + r) * g.kw + s];
            }
        }
    }
    Ok(img)
}

fn receptive_field(x: &Tensor, g: &ConvGeometry, shape: &[usize], pos: (usize, usize)) -> Tensor {
    let (h, w) = (shape[1], shape[2]);
    let mut out = Vec::with_capacity(g.in_channels * g.kh * g.kw);
    for c in 0..g.in_channels {
        for r in 0..g.kh {
            for s in 0..g.kw {
                out.push(x.data()[c * h * w + (pos.0 + r) * w + pos.1 + s]);
            }
        }
    }
    Tensor::from_vec(out)
}

/// Probes every first-layer kernel of `model`.
pub fn probe_filters(model: Arc<Checkpoint>, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if !(cfg.lambda.is_finite() && cfg.lambda > 0.0) {
        return Err(LdamError::InvalidArgument(format!(
            "lambda must be > 0 for the fixed point to exist, got {}",
            cfg.lambda
        )));
    }
    let g = first_conv(&model)?;
    let shape = model.arch.input_shape.clone();
    let l2 = RegularizerSpec::new(RegularizerKind::L2, cfg.lambda)?;
    let mut kernels = Vec::with_capacity(g.channels);
    for channel in 0..g.channels {
        let neuron = NeuronRef {
            layer_index: 0,
            unit: channel,
            spatial: Some(cfg.position),
            stage: Stage::PreSoftmax,
        };
        let obj = Arc::new(NeuronObjective::new(model.clone(), neuron)?);
        let kernel = embedded_kernel(&model, &g, channel, cfg.position)?;
        let target = kernel.scale(1.0 / cfg.lambda);

        let x = gradient_ascent_am(obj.as_ref(), &[l2], cfg.ascent_steps, cfg.ascent_lr, cfg.seed)?;
        let ascent_relative_error = max_relative_error(&x, &target);

        let beta = cfg.step_fraction * cfg.temperature as f64 / cfg.lambda as f64;
        let sampler = SamplerConfig {
            mode: SamplerMode::Principled,
            temperature: cfg.temperature,
            schedule: StepSchedule::constant(beta),
            regularizers: vec![l2],
            avg_window: cfg.avg_window,
            seed: cfg.seed ^ channel as u64,
            ..Default::default()
        };
        let mut chain = Chain::new(obj, None, sampler)?;
        let mut steps = 0;
        while steps < cfg.max_sampler_steps && chain.state().average.count() < cfg.avg_window.max(1) {
            chain.advance()?;
            steps += 1;
        }
        let sample_cosine = match chain.state().average.mean() {
            Ok(avg) => Some(
                receptive_field(&avg, &g, &shape, cfg.position)
                    .cosine(&receptive_field(&kernel, &g, &shape, cfg.position))?,
            ),
            Err(LdamError::NoSamples) => None,
            Err(e) => return Err(e),
        };
        kernels.push(KernelProbe {
            channel,
            ascent_relative_error,
            sample_cosine,
            sampler_steps: steps,
        });
    }
    Ok(ProbeReport {
        lambda: cfg.lambda,
        position: cfg.position,
        kernels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_lenet;

    #[test]
    fn untrained_kernels_are_recovered() {
        let cfg = ProbeConfig {
            max_sampler_steps: 5000,
            ..Default::default()
        };
        let r = probe_filters(Arc::new(build_lenet(1)), &cfg).unwrap();
        assert_eq!(r.kernels.len(), 6);
        for k in &r.kernels {
            assert!(k.ascent_relative_error < 1e-3, "{k:?}");
            assert!(k.sample_cosine.unwrap() > 0.95, "{k:?}");
        }
    }

    #[test]
    fn zero_lambda_is_refused() {
        let cfg = ProbeConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(probe_filters(Arc::new(build_lenet(1)), &cfg).is_err());
    }
}
