//! Layer kernels, a LeNet training step and sampler steps.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use ldam_core::layers::{layer_backward, layer_forward, softmax_cross_entropy};
use ldam_core::optim::RmsProp;
use ldam_core::{
    build_discriminator, build_lenet, Chain, NeuronObjective, NeuronRef, RegularizerKind,
    RegularizerSpec, RmsPropConfig, SamplerConfig, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 64;

fn images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, 1, 28, 28], (0..n * 784).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn layers(c: &mut Criterion) {
    let model = build_lenet(0);
    let x = images(BATCH, 1);
    let mut group = c.benchmark_group("layer");
    for (i, spec) in model.arch.layers.iter().enumerate() {
        let input = model.forward_until(&x, i).unwrap();
        let params = &model.params[i];
        let name = format!("{i:02}-{}", spec.name());
        group.bench_function(format!("{name}/forward"), |b| {
            b.iter(|| layer_forward(spec, params, black_box(&input)).unwrap())
        });
        let (out, cache) = layer_forward(spec, params, &input).unwrap();
        let grad = Tensor::new(out.shape().to_vec(), vec![1.0; out.len()]).unwrap();
        group.bench_function(format!("{name}/backward"), |b| {
            b.iter(|| layer_backward(spec, params, &cache, black_box(&grad)).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let x = images(BATCH, 2);
    let labels: Vec<u8> = (0..BATCH).map(|i| (i % 10) as u8).collect();
    let mut model = build_lenet(0);
    let mut opt = RmsProp::new(RmsPropConfig::default(), &model.params);
    let logits = model.arch.logits_layer() + 1;
    c.bench_function("lenet/train_step_batch64", |b| {
        b.iter(|| {
            let trace = model.forward_trace(&x, logits).unwrap();
            let (_, g) = softmax_cross_entropy(trace.outputs.last().unwrap(), &labels).unwrap();
            let (_, grads) = model.backward(&trace, g, true).unwrap();
            opt.step(&mut model.params, &grads).unwrap();
        })
    });
}

fn sampler(c: &mut Criterion) {
    let model = Arc::new(build_lenet(0));
    let obj = Arc::new(NeuronObjective::new(model.clone(), NeuronRef::output(&model.arch, 3)).unwrap());
    let disc = Arc::new(build_discriminator(0));
    let mut group = c.benchmark_group("sampler");
    for (name, regs) in [
        ("free_step/l2", vec![RegularizerSpec { kind: RegularizerKind::L2, weight: 0.1 }]),
        (
            "free_step/l2_tv_discriminator",
            vec![
                RegularizerSpec { kind: RegularizerKind::L2, weight: 0.1 },
                RegularizerSpec { kind: RegularizerKind::Tv, weight: 0.1 },
                RegularizerSpec { kind: RegularizerKind::Discriminator, weight: 0.5 },
            ],
        ),
    ] {
        let cfg = SamplerConfig {
            regularizers: regs,
            ..Default::default()
        };
        let mut chain = Chain::new(obj.clone(), Some(disc.clone()), cfg).unwrap();
        group.bench_function(name, |b| b.iter(|| chain.advance().unwrap()));
    }
    group.finish();
}

criterion_group!(benches, layers, training_step, sampler);
criterion_main!(benches);
