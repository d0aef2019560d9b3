//! Differentiable scalar objectives the sampler can climb.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::model::{neuron_value_grad, Checkpoint, NeuronRef};
use crate::tensor::Tensor;

/// A scalar function of an image with an input gradient.
pub trait Objective: Send + Sync {
    /// Per-sample input shape.
    fn input_shape(&self) -> Vec<usize>;

    /// Value at `x`, plus `∇f(x)` when `want_grad` is set.
    fn value_grad(&self, x: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)>;

    /// The targeted neuron, if this objective is one.
    fn neuron(&self) -> Option<NeuronRef> {
        None
    }
}

/// `f_α(x)`: the activation of one neuron of a model.
#[derive(Debug, Clone)]
pub struct NeuronObjective {
    pub model: Arc<Checkpoint>,
    pub neuron: NeuronRef,
}

impl NeuronObjective {
    pub fn new(model: Arc<Checkpoint>, neuron: NeuronRef) -> Result<Self> {
        neuron.flat_index(&model.arch)?;
        Ok(Self { model, neuron })
    }
}

impl Objective for NeuronObjective {
    fn input_shape(&self) -> Vec<usize> {
        self.model.arch.input_shape.clone()
    }

    fn value_grad(&self, x: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
        let (v, g) = neuron_value_grad(&self.model, x, &self.neuron, want_grad)?;
        Ok((v as f64, g))
    }

    fn neuron(&self) -> Option<NeuronRef> {
        Some(self.neuron)
    }
}

fn check_shape(x: &Tensor, want: &[usize], kind: &'static str) -> Result<()> {
    if x.shape() != want {
        return Err(shape_err(kind, format!("expects {want:?}, got {:?}", x.shape())));
    }
    Ok(())
}

/// `f(x) = -½ ‖x - c‖² / τ`; its Gibbs density at temperature `T` is `N(c, τT·I)`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub center: Tensor,
    pub tau: f64,
}

impl Objective for Quadratic {
    fn input_shape(&self) -> Vec<usize> {
        self.center.shape().to_vec()
    }

    fn value_grad(&self, x: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
        check_shape(x, self.center.shape(), "Quadratic")?;
        let d = x.sub(&self.center)?;
        let v = -0.5 * d.dot(&d)? / self.tau;
        let g = want_grad.then(|| d.scale((-1.0 / self.tau) as f32));
        Ok((v, g))
    }
}

/// Mixture of two isotropic Gaussian bumps in log space:
/// `g(x) = log(exp(-½‖x - m₁‖²/s²) + exp(-½‖x - m₂‖²/s²))`.
#[derive(Debug, Clone)]
pub struct DoubleWell {
    pub m1: Tensor,
    pub m2: Tensor,
    pub s: f64,
}

impl DoubleWell {
    /// 0 if `x` is nearer `m₁`, 1 if nearer `m₂`.
    pub fn basin(&self, x: &Tensor) -> usize {
        let d1 = x.sub(&self.m1).map(|d| d.l2_norm()).unwrap_or(f64::INFINITY);
        let d2 = x.sub(&self.m2).map(|d| d.l2_norm()).unwrap_or(f64::INFINITY);
        usize::from(d2 < d1)
    }
}

impl Objective for DoubleWell {
    fn input_shape(&self) -> Vec<usize> {
        self.m1.shape().to_vec()
    }

    fn value_grad(&self, x: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
        check_shape(x, self.m1.shape(), "DoubleWell")?;
        let d1 = x.sub(&self.m1)?;
        let d2 = x.sub(&self.m2)?;
        let s2 = self.s * self.s;
        let e1 = -0.5 * d1.dot(&d1)? / s2;
        let e2 = -0.5 * d2.dot(&d2)? / s2;
        let m = e1.max(e2);
        let (w1, w2) = ((e1 - m).exp(), (e2 - m).exp());
        let v = m + (w1 + w2).ln();
        let g = want_grad.then(|| {
            // ∇g = -(p₁ (x - m₁) + p₂ (x - m₂)) / s²
            let (p1, p2) = (w1 / (w1 + w2), w2 / (w1 + w2));
            let mut g = d1.scale((-p1 / s2) as f32);
            g.axpy((-p2 / s2) as f32, &d2).expect("same shape");
            g
        });
        Ok((v, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_relative_error};

    #[test]
    fn double_well_gradient_matches_finite_differences() {
        let dw = DoubleWell {
            m1: Tensor::from_vec(vec![-2.0, 0.0]),
            m2: Tensor::from_vec(vec![2.0, 0.0]),
            s: 1.0,
        };
        for p in [[0.3, -0.4], [-1.5, 0.7], [2.2, 0.1]] {
            let x = Tensor::from_vec(p.to_vec());
            let g = dw.value_grad(&x, true).unwrap().1.unwrap();
            let fd = finite_diff_grad(|t| Ok(dw.value_grad(t, false)?.0), &x, 1e-3).unwrap();
            assert!(max_relative_error(&g, &fd) < 1e-3);
        }
        assert_eq!(dw.basin(&Tensor::from_vec(vec![-0.1, 3.0])), 0);
        assert_eq!(dw.basin(&Tensor::from_vec(vec![0.1, -3.0])), 1);
    }

    #[test]
    fn quadratic_value_and_gradient() {
        let q = Quadratic {
            center: Tensor::from_vec(vec![1.0, -1.0]),
            tau: 2.0,
        };
        let (v, g) = q.value_grad(&Tensor::from_vec(vec![3.0, -1.0]), true).unwrap();
        assert_eq!(v, -1.0);
        assert_eq!(g.unwrap().data(), &[-1.0, 0.0]);
        assert!(q.value_grad(&Tensor::zeros(&[3]), false).is_err());
    }
}
