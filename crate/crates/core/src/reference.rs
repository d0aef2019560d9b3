//! Direct-loop `f64` forward pass, kept independent of the optimized layers.
//!
//! Used as a low-noise oracle: finite differences through the `f32` network
//! are dominated by rounding, while these loops are accurate to ~1e-15.

use crate::error::{shape_err, Result};
use crate::layers::{LayerSpec, Padding};
use crate::model::Checkpoint;
use crate::tensor::Tensor;

/// Output of one sample through layers `0..end`, flattened, plus the
/// piecewise-linear regime (ReLU signs and max-pool winners) it passed through.
#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    pub signature: Vec<u8>,
}

pub fn reference_forward(ckpt: &Checkpoint, x: &Tensor, end: usize) -> Result<ReferenceOutput> {
    let shape = ckpt.arch.input_shape.clone();
    if x.len() != shape.iter().product::<usize>() {
        return Err(shape_err("reference", format!("input {:?} vs {:?}", x.shape(), shape)));
    }
    let mut out = ReferenceOutput {
        values: x.data().iter().map(|&v| v as f64).collect(),
        shape,
        signature: Vec::new(),
    };
    for (layer, params) in ckpt.arch.layers.iter().zip(&ckpt.params).take(end) {
        let p: Vec<Vec<f64>> = params
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let next = reference_layer(layer, &p, &out.values, &out.shape);
        out.values = next.values;
        out.shape = next.shape;
        out.signature.extend(next.signature);
    }
    Ok(out)
}

/// One layer on one unbatched sample of shape `shape` (`[C, H, W]` or `[K]`).
/// Parameters are the layer's tensors in order, flattened.
pub fn reference_layer(layer: &LayerSpec, params: &[Vec<f64>], x: &[f64], shape: &[usize]) -> ReferenceOutput {
    let mut signature = Vec::new();
    let (values, shape) = match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            padding,
        } => {
            let (h, w) = (shape[1], shape[2]);
            let (ph, pw) = match padding {
                Padding::Valid => (0, 0),
                Padding::Same => (kernel_h / 2, kernel_w / 2),
            };
            let oh = h + 2 * ph + 1 - kernel_h;
            let ow = w + 2 * pw + 1 - kernel_w;
            let (wt, b) = (&params[0], &params[1]);
            let mut out = vec![0.0; out_channels * oh * ow];
            for o in 0..out_channels {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = b[o];
                        for i in 0..in_channels {
                            for u in 0..kernel_h {
                                for v in 0..kernel_w {
                                    let y = (r + u) as isize - ph as isize;
                                    let z = (c + v) as isize - pw as isize;
                                    if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * in_channels + i) * kernel_h + u) * kernel_w + v]
                                        * x[(i * h + y as usize) * w + z as usize];
                                }
                            }
                        }
                        out[(o * oh + r) * ow + c] = acc;
                    }
                }
            }
            (out, vec![out_channels, oh, ow])
        }
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let (wt, b) = (&params[0], &params[1]);
            let out = (0..out_features)
                .map(|o| b[o] + (0..in_features).map(|i| wt[o * in_features + i] * x[i]).sum::<f64>())
                .collect();
            (out, vec![out_features])
        }
        LayerSpec::Relu => {
            signature.extend(x.iter().map(|&v| u8::from(v > 0.0)));
            (x.iter().map(|v| v.max(0.0)).collect(), shape.to_vec())
        }
        LayerSpec::MaxPool2x2 => {
            let (ch, h, w) = (shape[0], shape[1], shape[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(ch * oh * ow);
            for p in 0..ch {
                for r in 0..oh {
                    for c in 0..ow {
                        let at = |k: usize| x[(p * h + 2 * r + k / 2) * w + 2 * c + k % 2];
                        let best = (1..4).fold(0, |b, k| if at(k) > at(b) { k } else { b });
                        signature.push(best as u8);
                        out.push(at(best));
                    }
                }
            }
            (out, vec![ch, oh, ow])
        }
        LayerSpec::Sigmoid => (x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(), shape.to_vec()),
        LayerSpec::SoftmaxCrossEntropy => {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
            (x.iter().map(|v| (v - m).exp() / z).collect(), shape.to_vec())
        }
    };
    ReferenceOutput {
        values,
        shape,
        signature,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_lenet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_the_optimized_forward_pass() {
        let m = build_lenet(3);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.random_range(0.0..1.0)).collect())
                .unwrap();
            let fast = m.predict(&x).unwrap();
            let slow = reference_forward(&m, &x, m.arch.layers.len()).unwrap();
            for (a, b) in fast.data().iter().zip(&slow.values) {
                assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
}
