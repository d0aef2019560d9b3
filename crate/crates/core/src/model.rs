//! Layer-stack models, neuron addressing, and parameter/prediction averaging.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LdamError, Result};
use crate::layers::{
    layer_backward, layer_backward_input, layer_forward, softmax_in_place, LayerCache, LayerSpec,
    Padding,
};
use crate::tensor::Tensor;

/// Declarative layer stack with a fixed per-sample input shape `[C, H, W]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelArch {
    /// Verifies that layer shapes chain; returns every layer's per-sample output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape[1..].to_vec());
        }
        Ok(out)
    }

    /// Index of the layer producing class logits: the last layer if it is not a
    /// squashing layer, otherwise the one before it.
    pub fn logits_layer(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxCrossEntropy | LayerSpec::Sigmoid) => self.layers.len() - 2,
            _ => self.layers.len() - 1,
        }
    }

    pub fn num_outputs(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(shapes[self.logits_layer()].iter().product())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let n = l.param_shapes().len();
            if n > 0 {
                names.push(format!("layer{i}.weight"));
                names.push(format!("layer{i}.bias"));
            }
        }
        names
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    /// Optimizer name and constants, e.g. `rmsprop(lr=0.001,rho=0.9,...)`.
    pub optimizer: String,
    pub accuracy: Option<f64>,
    /// Number of snapshots folded into an averaged checkpoint.
    pub averaged_over: Option<usize>,
    /// First epoch (1-based) contributing to an averaged checkpoint.
    pub averaged_from_epoch: Option<usize>,
}

/// Architecture plus parameters, one tensor list per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ModelArch,
    pub params: Vec<Vec<Tensor>>,
    pub meta: CheckpointMeta,
}

/// Per-layer activations and caches of one forward pass.
pub struct ForwardTrace {
    pub outputs: Vec<Tensor>,
    caches: Vec<LayerCache>,
}

impl Checkpoint {
    pub fn new(arch: ModelArch, params: Vec<Vec<Tensor>>, meta: CheckpointMeta) -> Result<Self> {
        arch.layer_shapes()?;
        if params.len() != arch.layers.len() {
            return Err(LdamError::Checkpoint(format!(
                "{} parameter groups for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        for (i, (layer, group)) in arch.layers.iter().zip(&params).enumerate() {
            let want = layer.param_shapes();
            let got: Vec<Vec<usize>> = group.iter().map(|t| t.shape().to_vec()).collect();
            if want != got {
                return Err(LdamError::CheckpointTensor {
                    name: format!("layer{i}"),
                    reason: format!("shapes {got:?}, architecture needs {want:?}"),
                });
            }
        }
        Ok(Self { arch, params, meta })
    }

    /// Fresh parameters: He-scaled Gaussian weights, zero biases.
    pub fn init(arch: ModelArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.layers.len());
        for layer in &arch.layers {
            let mut group = Vec::new();
            for (j, shape) in layer.param_shapes().into_iter().enumerate() {
                if j == 0 {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                        .expect("positive std");
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    group.push(Tensor::new(shape, data)?);
                } else {
                    group.push(Tensor::zeros(&shape));
                }
            }
            params.push(group);
        }
        let meta = CheckpointMeta {
            seed,
            ..Default::default()
        };
        Self::new(arch, params, meta)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    pub fn same_arch(&self, other: &Checkpoint) -> bool {
        self.arch == other.arch
    }

    /// Promotes a single `[C, H, W]` image to a batch of one.
    pub fn batched(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s == self.arch.input_shape.as_slice() {
            let mut shape = vec![1];
            shape.extend_from_slice(s);
            return x.clone().reshape(&shape);
        }
        if s.len() == self.arch.input_shape.len() + 1 && s[1..] == self.arch.input_shape[..] {
            return Ok(x.clone());
        }
        Err(shape_err(
            "input",
            format!(
                "{} expects {:?} (optionally batched), got {s:?}",
                self.arch.name, self.arch.input_shape
            ),
        ))
    }

    /// Runs layers `0..end` on a batched input, keeping caches for backward.
    pub fn forward_trace(&self, x: &Tensor, end: usize) -> Result<ForwardTrace> {
        let mut outputs = Vec::with_capacity(end);
        let mut caches = Vec::with_capacity(end);
        let mut cur = x.clone();
        for (layer, params) in self.arch.layers.iter().zip(&self.params).take(end) {
            let (out, cache) = layer_forward(layer, params, &cur)?;
            caches.push(cache);
            outputs.push(out.clone());
            cur = out;
        }
        Ok(ForwardTrace { outputs, caches })
    }

    /// Output of the first `end` layers.
    pub fn forward_until(&self, x: &Tensor, end: usize) -> Result<Tensor> {
        let mut cur = self.batched(x)?;
        for (layer, params) in self.arch.layers.iter().zip(&self.params).take(end) {
            cur = layer_forward(layer, params, &cur)?.0;
        }
        Ok(cur)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_until(x, self.arch.logits_layer() + 1)
    }

    /// Final output (softmax probabilities for classifiers, sigmoid for discriminators).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_until(x, self.arch.layers.len())
    }

    /// Backpropagates `grad` from the output of layer `trace.len() - 1` to the input,
    /// returning the input gradient and (optionally) parameter gradients per layer.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad: Tensor,
        want_params: bool,
    ) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        let mut g = grad;
        let n = trace.caches.len();
        let mut grads = vec![Vec::new(); n];
        for i in (0..n).rev() {
            let layer = &self.arch.layers[i];
            let params = &self.params[i];
            if want_params {
                let (gi, gp) = layer_backward(layer, params, &trace.caches[i], &g)?;
                grads[i] = gp;
                g = gi;
            } else {
                g = layer_backward_input(layer, params, &trace.caches[i], &g)?;
            }
        }
        Ok((g, grads))
    }

    /// Applies `params -= step` group-wise.
    pub fn apply_update(&mut self, update: &[Vec<Tensor>]) -> Result<()> {
        for (group, upd) in self.params.iter_mut().zip(update) {
            for (p, u) in group.iter_mut().zip(upd) {
                p.axpy(-1.0, u)?;
            }
        }
        Ok(())
    }
}

pub fn lenet_arch() -> ModelArch {
    ModelArch {
        name: "lenet5".into(),
        input_shape: vec![1, 28, 28],
        layers: conv_trunk(10, LayerSpec::SoftmaxCrossEntropy),
    }
}

pub fn discriminator_arch() -> ModelArch {
    ModelArch {
        name: "lenet5-discriminator".into(),
        input_shape: vec![1, 28, 28],
        layers: conv_trunk(1, LayerSpec::Sigmoid),
    }
}

/// conv5x5(6) relu pool conv5x5(16) relu pool dense(120) relu dense(84) relu dense(outputs) head
fn conv_trunk(outputs: usize, head: LayerSpec) -> Vec<LayerSpec> {
    let conv = |i, o| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel_h: 5,
        kernel_w: 5,
        padding: Padding::Valid,
    };
    let dense = |i, o| LayerSpec::Dense {
        in_features: i,
        out_features: o,
    };
    vec![
        conv(1, 6),
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        conv(6, 16),
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        dense(16 * 4 * 4, 120),
        LayerSpec::Relu,
        dense(120, 84),
        LayerSpec::Relu,
        dense(84, outputs),
        head,
    ]
}

pub fn build_lenet(seed: u64) -> Checkpoint {
    Checkpoint::init(lenet_arch(), seed).expect("LeNet architecture is valid")
}

pub fn build_discriminator(seed: u64) -> Checkpoint {
    Checkpoint::init(discriminator_arch(), seed).expect("discriminator architecture is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Raw output of the addressed layer (for conv/dense: before any nonlinearity).
    #[default]
    PreSoftmax,
    /// Softmax over the logits layer, then the addressed unit.
    PostSoftmax,
}

/// Addresses one neuron: a layer output, a unit (channel) and, for image-shaped
/// outputs, a spatial position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer_index: usize,
    pub unit: usize,
    #[serde(default)]
    pub spatial: Option<(usize, usize)>,
    #[serde(default)]
    pub stage: Stage,
}

impl NeuronRef {
    pub fn output(arch: &ModelArch, unit: usize) -> Self {
        Self {
            layer_index: arch.logits_layer(),
            unit,
            spatial: None,
            stage: Stage::PreSoftmax,
        }
    }

    /// Checks the reference against `arch`; returns the flat index within the
    /// addressed layer's per-sample output.
    pub fn flat_index(&self, arch: &ModelArch) -> Result<usize> {
        let shapes = arch.layer_shapes()?;
        let shape = shapes.get(self.layer_index).ok_or_else(|| {
            LdamError::InvalidNeuron(format!(
                "layer {} out of range (model has {} layers)",
                self.layer_index,
                shapes.len()
            ))
        })?;
        if self.stage == Stage::PostSoftmax && self.layer_index != arch.logits_layer() {
            return Err(LdamError::InvalidNeuron(format!(
                "post-softmax neurons live on the logits layer {}, not {}",
                arch.logits_layer(),
                self.layer_index
            )));
        }
        match (shape.as_slice(), self.spatial) {
            (&[c, h, w], Some((r, col))) => {
                if self.unit >= c || r >= h || col >= w {
                    return Err(LdamError::InvalidNeuron(format!(
                        "({}, {r}, {col}) outside layer {} output [{c}, {h}, {w}]",
                        self.unit, self.layer_index
                    )));
                }
                Ok((self.unit * h + r) * w + col)
            }
            (&[c, h, w], None) => Err(LdamError::InvalidNeuron(format!(
                "layer {} output is [{c}, {h}, {w}]; a spatial position is required",
                self.layer_index
            ))),
            (&[k], None) => {
                if self.unit >= k {
                    return Err(LdamError::InvalidNeuron(format!(
                        "unit {} outside layer {} output of {k}",
                        self.unit, self.layer_index
                    )));
                }
                Ok(self.unit)
            }
            (s, _) => Err(LdamError::InvalidNeuron(format!(
                "cannot address layer {} with output shape {s:?} using {self}",
                self.layer_index
            ))),
        }
    }
}

impl fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}:{}", self.layer_index, self.unit)?;
        if let Some((r, c)) = self.spatial {
            write!(f, "@{r},{c}")?;
        }
        if self.stage == Stage::PostSoftmax {
            write!(f, ":post")?;
        }
        Ok(())
    }
}

impl FromStr for NeuronRef {
    type Err = LdamError;

    /// Parses `layer<L>:<unit>[@<row>,<col>][:post]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || LdamError::InvalidNeuron(format!("cannot parse `{s}`; expected layer<L>:<unit>[@r,c][:post]"));
        let rest = s.strip_prefix("layer").ok_or_else(bad)?;
        let mut parts = rest.split(':');
        let layer_index = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let unit_part = parts.next().ok_or_else(bad)?;
        let stage = match parts.next() {
            None => Stage::PreSoftmax,
            Some("post") => Stage::PostSoftmax,
            Some("pre") => Stage::PreSoftmax,
            Some(_) => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        let (unit, spatial) = match unit_part.split_once('@') {
            Some((u, pos)) => {
                let (r, c) = pos.split_once(',').ok_or_else(bad)?;
                (
                    u.parse().map_err(|_| bad())?,
                    Some((r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?)),
                )
            }
            None => (unit_part.parse().map_err(|_| bad())?, None),
        };
        Ok(Self {
            layer_index,
            unit,
            spatial,
            stage,
        })
    }
}

/// Activation `f_α(x)` of the addressed neuron for a single input.
pub fn forward_to_neuron(ckpt: &Checkpoint, x: &Tensor, n: &NeuronRef) -> Result<f32> {
    Ok(neuron_value_grad(ckpt, x, n, false)?.0)
}

/// `∂f_α/∂x`, shaped like `x`.
pub fn grad_wrt_input(ckpt: &Checkpoint, x: &Tensor, n: &NeuronRef) -> Result<Tensor> {
    Ok(neuron_value_grad(ckpt, x, n, true)?.1.expect("gradient requested"))
}

/// Activation and (optionally) its input gradient from one forward pass.
pub fn neuron_value_grad(
    ckpt: &Checkpoint,
    x: &Tensor,
    n: &NeuronRef,
    want_grad: bool,
) -> Result<(f32, Option<Tensor>)> {
    let idx = n.flat_index(&ckpt.arch)?;
    let xb = ckpt.batched(x)?;
    if xb.batch() != 1 {
        return Err(shape_err("input", "neuron queries take a single image"));
    }
    let trace = ckpt.forward_trace(&xb, n.layer_index + 1)?;
    let out = trace.outputs.last().expect("at least one layer");
    let mut seed = Tensor::zeros(out.shape());
    let value = match n.stage {
        Stage::PreSoftmax => {
            seed.data_mut()[idx] = 1.0;
            out.data()[idx]
        }
        Stage::PostSoftmax => {
            let mut p = out.data().to_vec();
            softmax_in_place(&mut p);
            // d p_u / d z_j = p_u (δ_uj - p_j)
            for (j, s) in seed.data_mut().iter_mut().enumerate() {
                let delta = if j == idx { 1.0 } else { 0.0 };
                *s = p[idx] * (delta - p[j]);
            }
            p[idx]
        }
    };
    if !want_grad {
        return Ok((value, None));
    }
    let (g, _) = ckpt.backward(&trace, seed, false)?;
    Ok((value, Some(g.reshape(x.shape())?)))
}

/// Online elementwise mean of parameter snapshots, kept in `f64`.
#[derive(Debug, Clone)]
pub struct RunningParamMean {
    template: Checkpoint,
    mean: Vec<Vec<Vec<f64>>>,
    count: usize,
}

impl RunningParamMean {
    pub fn new(first: &Checkpoint) -> Self {
        let mean = first
            .params
            .iter()
            .map(|g| g.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect())
            .collect();
        Self {
            template: first.clone(),
            mean,
            count: 1,
        }
    }

    /// `mean_k = ((k - 1) mean_{k-1} + θ_k) / k`
    pub fn push(&mut self, snap: &Checkpoint) -> Result<()> {
        if !snap.same_arch(&self.template) {
            return Err(LdamError::ArchMismatch(format!(
                "{} vs {}",
                snap.arch.name, self.template.arch.name
            )));
        }
        self.count += 1;
        let k = self.count as f64;
        for (mg, sg) in self.mean.iter_mut().zip(&snap.params) {
            for (m, t) in mg.iter_mut().zip(sg) {
                for (a, &v) in m.iter_mut().zip(t.data()) {
                    *a = ((k - 1.0) * *a + v as f64) / k;
                }
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut out = self.template.clone();
        for (pg, mg) in out.params.iter_mut().zip(&self.mean) {
            for (p, m) in pg.iter_mut().zip(mg) {
                for (d, &v) in p.data_mut().iter_mut().zip(m) {
                    *d = v as f32;
                }
            }
        }
        out.meta.averaged_over = Some(self.count);
        out.meta.accuracy = None;
        out
    }
}

/// Elementwise mean of the snapshots' parameters.
pub fn average_params(snapshots: &[Checkpoint]) -> Result<Checkpoint> {
    let (first, rest) = snapshots
        .split_first()
        .ok_or_else(|| LdamError::InvalidArgument("no snapshots to average".into()))?;
    let mut acc = RunningParamMean::new(first);
    for s in rest {
        acc.push(s)?;
    }
    let mut out = acc.to_checkpoint();
    out.meta.epoch = snapshots.iter().map(|s| s.meta.epoch).max().unwrap_or(0);
    out.meta.averaged_from_epoch = Some(first.meta.epoch);
    Ok(out)
}

/// Mean of the snapshots' class probabilities for a batch `x`; rows sum to 1.
pub fn ensemble_predict(snapshots: &[Checkpoint], x: &Tensor) -> Result<Tensor> {
    let first = snapshots
        .first()
        .ok_or_else(|| LdamError::InvalidArgument("empty ensemble".into()))?;
    if let Some(bad) = snapshots.iter().find(|s| !s.same_arch(first)) {
        return Err(LdamError::ArchMismatch(format!(
            "{} vs {}",
            bad.arch.name, first.arch.name
        )));
    }
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for s in snapshots {
        let mut z = s.logits(x)?;
        let k = z.shape()[1];
        for row in z.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        shape = z.shape().to_vec();
        match acc.as_mut() {
            None => acc = Some(z.data().iter().map(|&v| v as f64).collect()),
            Some(a) => a.iter_mut().zip(z.data()).for_each(|(a, &v)| *a += v as f64),
        }
    }
    let m = snapshots.len() as f64;
    let data = acc.unwrap_or_default().into_iter().map(|v| (v / m) as f32).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad_masked, max_relative_error_masked};
    use crate::reference::reference_forward;
    use rand::Rng;

    fn noise(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn lenet_is_seeded_and_outputs_ten() {
        let a = build_lenet(4);
        assert_eq!(a, build_lenet(4));
        assert_ne!(a.params, build_lenet(5).params);
        assert_eq!(a.logits(&noise(1)).unwrap().shape(), &[1, 10]);
        assert_eq!(a.arch.num_outputs().unwrap(), 10);
    }

    #[test]
    fn discriminator_output_is_squashed() {
        let d = build_discriminator(2);
        assert_eq!(d, build_discriminator(2));
        for s in 0..5 {
            let p = d.predict(&noise(s)).unwrap();
            assert_eq!(p.shape(), &[1, 1]);
            assert!(p.data()[0] > 0.0 && p.data()[0] < 1.0);
        }
    }

    #[test]
    fn post_softmax_outputs_sum_to_one() {
        let m = build_lenet(0);
        let x = noise(3);
        let total: f64 = (0..10)
            .map(|u| {
                let n = NeuronRef {
                    stage: Stage::PostSoftmax,
                    ..NeuronRef::output(&m.arch, u)
                };
                forward_to_neuron(&m, &x, &n).unwrap() as f64
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn first_conv_neuron_is_kernel_dot_patch() {
        let m = build_lenet(1);
        let n = NeuronRef {
            layer_index: 0,
            unit: 2,
            spatial: Some((3, 7)),
            stage: Stage::PreSoftmax,
        };
        let mut x = Tensor::zeros(&[1, 28, 28]);
        let mut expected = m.params[0][1].data()[2] as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..5 {
            for j in 0..5 {
                let v: f32 = rng.random_range(-1.0..1.0);
                x.data_mut()[(3 + i) * 28 + 7 + j] = v;
                expected += v as f64 * m.params[0][0].data()[2 * 25 + i * 5 + j] as f64;
            }
        }
        let got = forward_to_neuron(&m, &x, &n).unwrap() as f64;
        assert!((got - expected).abs() < 1e-5);

        let g = grad_wrt_input(&m, &x, &n).unwrap();
        for r in 0..28 {
            for c in 0..28 {
                let inside = (3..8).contains(&r) && (7..12).contains(&c);
                let want = if inside {
                    m.params[0][0].data()[2 * 25 + (r - 3) * 5 + (c - 7)]
                } else {
                    0.0
                };
                assert_eq!(g.data()[r * 28 + c], want);
            }
        }
    }

    #[test]
    fn invalid_neurons_are_rejected() {
        let arch = lenet_arch();
        let cases = [
            NeuronRef { layer_index: 40, unit: 0, spatial: None, stage: Stage::PreSoftmax },
            NeuronRef { layer_index: 10, unit: 10, spatial: None, stage: Stage::PreSoftmax },
            NeuronRef { layer_index: 0, unit: 0, spatial: None, stage: Stage::PreSoftmax },
            NeuronRef { layer_index: 0, unit: 0, spatial: Some((24, 0)), stage: Stage::PreSoftmax },
            NeuronRef { layer_index: 8, unit: 0, spatial: None, stage: Stage::PostSoftmax },
        ];
        for n in cases {
            assert!(matches!(n.flat_index(&arch), Err(LdamError::InvalidNeuron(_))), "{n}");
        }
    }

    #[test]
    fn neuron_ref_parses_and_prints() {
        for s in ["layer10:3", "layer0:2@4,5", "layer10:9:post"] {
            let n: NeuronRef = s.parse().unwrap();
            assert_eq!(n.to_string(), s);
        }
        assert!("conv:1".parse::<NeuronRef>().is_err());
        assert!("layer1:x".parse::<NeuronRef>().is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = build_lenet(11);
        let x = noise(12);
        for (u, stage) in [(3, Stage::PreSoftmax), (7, Stage::PostSoftmax)] {
            let n = NeuronRef {
                stage,
                ..NeuronRef::output(&m.arch, u)
            };
            let g = grad_wrt_input(&m, &x, &n).unwrap();
            let end = match stage {
                Stage::PreSoftmax => n.layer_index + 1,
                Stage::PostSoftmax => m.arch.layers.len(),
            };
            let (fd, smooth) = finite_diff_grad_masked(
                |t| {
                    let r = reference_forward(&m, t, end)?;
                    Ok((r.values[u], r.signature))
                },
                &x,
                1e-3,
            )
            .unwrap();
            assert!(smooth.iter().filter(|&&s| s).count() > 700);
            let err = max_relative_error_masked(&g, &fd, &smooth);
            assert!(err < 1e-2, "stage {stage:?}: {err}");
        }
    }

    #[test]
    fn averaging_two_snapshots() {
        let a = build_lenet(0);
        let mut b = a.clone();
        let mut c = a.clone();
        b.params[0][0].data_mut()[0] = 0.0;
        c.params[0][0].data_mut()[0] = 2.0;
        let avg = average_params(&[b.clone(), c]).unwrap();
        assert_eq!(avg.params[0][0].data()[0], 1.0);
        assert_eq!(avg.meta.averaged_over, Some(2));
        let same = average_params(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same.params, a.params);
        assert!(matches!(
            average_params(&[a, build_discriminator(0)]),
            Err(LdamError::ArchMismatch(_))
        ));
    }

    #[test]
    fn single_snapshot_ensemble_is_its_softmax() {
        let m = build_lenet(5);
        let x = Tensor::stack(&[noise(1), noise(2)]).unwrap();
        let e = ensemble_predict(std::slice::from_ref(&m), &x).unwrap();
        let p = m.predict(&x).unwrap();
        assert_eq!(e, p);
        for row in e.data().chunks(10) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
