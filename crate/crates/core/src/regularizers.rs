//! Image-prior regularizers `R(x)`.
//!
//! All regularizers are written in the maximization sense: larger values are
//! preferred, so they enter the sampler's objective as `f(x) + Σ λ_i R_i(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LdamError, Result};
use crate::model::{neuron_value_grad, Checkpoint, NeuronRef, Stage};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    L2,
    Tv,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub weight: f32,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, weight: f32) -> Result<Self> {
        let s = Self { kind, weight };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(LdamError::InvalidArgument(format!(
                "regularizer weight must be finite and >= 0, got {}",
                self.weight
            )));
        }
        Ok(())
    }

    /// Value and gradient of this regularizer at `x` (the weight is not applied).
    pub fn value_grad(&self, x: &Tensor, disc: Option<&Checkpoint>) -> Result<(f64, Tensor)> {
        match self.kind {
            RegularizerKind::L2 => Ok(l2_value_grad(x)),
            RegularizerKind::Tv => tv_value_grad(x),
            RegularizerKind::Discriminator => {
                let d = disc.ok_or_else(|| {
                    LdamError::InvalidArgument("discriminator regularizer without a model".into())
                })?;
                disc_value_grad(x, d)
            }
        }
    }
}

/// `R(x) = -½‖x‖²`, `∇R = -x`.
pub fn l2_value_grad(x: &Tensor) -> (f64, Tensor) {
    let v = -0.5 * x.dot(x).expect("same shape");
    (v, x.scale(-1.0))
}

/// Negated squared total variation over the last two (spatial) dimensions:
/// `R(x) = -Σ (x[i, j+1] - x[i, j])² - Σ (x[i+1, j] - x[i, j])²`.
pub fn tv_value_grad(x: &Tensor) -> Result<(f64, Tensor)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(shape_err("Tv", format!("needs an image tensor, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.len() / (h * w);
    let d = x.data();
    let mut grad = vec![0.0f32; x.len()];
    let mut value = 0.0f64;
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let a = base + i * w + j;
                for b in [
                    (j + 1 < w).then(|| a + 1),
                    (i + 1 < h).then(|| a + w),
                ]
                .into_iter()
                .flatten()
                {
                    let diff = d[b] as f64 - d[a] as f64;
                    value -= diff * diff;
                    grad[b] -= (2.0 * diff) as f32;
                    grad[a] += (2.0 * diff) as f32;
                }
            }
        }
    }
    Ok((value, Tensor::new(s.to_vec(), grad)?))
}

/// `R(x) = D(x) ∈ (0, 1)` and its input gradient.
pub fn disc_value_grad(x: &Tensor, disc: &Checkpoint) -> Result<(f64, Tensor)> {
    let n = NeuronRef {
        layer_index: disc.arch.layers.len() - 1,
        unit: 0,
        spatial: None,
        stage: Stage::PreSoftmax,
    };
    let (v, g) = neuron_value_grad(disc, x, &n, true)?;
    Ok((v as f64, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{
        finite_diff_grad, finite_diff_grad_masked, max_relative_error, max_relative_error_masked,
    };
    use crate::reference::reference_forward;
    use crate::model::build_discriminator;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, shape: &[usize], scale: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
            .unwrap()
    }

    #[test]
    fn l2_examples() {
        let (v, g) = l2_value_grad(&Tensor::zeros(&[3]));
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
        let (v, g) = l2_value_grad(&Tensor::from_vec(vec![3.0, 4.0]));
        assert_eq!(v, -12.5);
        assert_eq!(g.data(), &[-3.0, -4.0]);
    }

    #[test]
    fn l2_matches_finite_differences() {
        let x = rand_img(1, &[1, 6, 6], 1.0);
        let fd = finite_diff_grad(|t| Ok(l2_value_grad(t).0), &x, 1e-3).unwrap();
        assert!(max_relative_error(&l2_value_grad(&x).1, &fd) < 1e-4);
    }

    #[test]
    fn tv_examples() {
        let (v, g) = tv_value_grad(&Tensor::full(&[1, 4, 4], 0.7)).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let (v, g) = tv_value_grad(&x).unwrap();
        assert_eq!(v, -1.0);
        assert_eq!(g.data(), &[2.0, -2.0]);
    }

    #[test]
    fn tv_matches_finite_differences() {
        let x = rand_img(2, &[2, 5, 7], 1.0);
        let fd = finite_diff_grad(|t| Ok(tv_value_grad(t)?.0), &x, 1e-3).unwrap();
        assert!(max_relative_error(&tv_value_grad(&x).unwrap().1, &fd) < 1e-4);
    }

    #[test]
    fn discriminator_value_and_gradient() {
        let d = build_discriminator(5);
        let x = rand_img(3, &[1, 28, 28], 0.5);
        let (v, g) = disc_value_grad(&x, &d).unwrap();
        assert!(v > 0.0 && v < 1.0);
        let end = d.arch.layers.len();
        let (fd, smooth) = finite_diff_grad_masked(
            |t| {
                let r = reference_forward(&d, t, end)?;
                Ok((r.values[0], r.signature))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(max_relative_error_masked(&g, &fd, &smooth) < 1e-2);
        assert!(disc_value_grad(&Tensor::zeros(&[1, 8, 8]), &d).is_err());
    }

    #[test]
    fn symmetric_discriminator_is_well_defined_at_zero() {
        let mut d = build_discriminator(0);
        let last = d.params.len() - 2;
        for t in &mut d.params[last] {
            t.data_mut().fill(0.0);
        }
        let (v, g) = disc_value_grad(&Tensor::zeros(&[1, 28, 28]), &d).unwrap();
        assert_eq!(v, 0.5);
        assert!(g.is_finite());
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(RegularizerSpec::new(RegularizerKind::L2, -0.1).is_err());
        assert!(RegularizerSpec::new(RegularizerKind::Tv, f32::NAN).is_err());
        assert!(RegularizerSpec::new(RegularizerKind::L2, 0.0).is_ok());
    }

    fn directional_check(f: impl Fn(&Tensor) -> (f64, Tensor), x: &Tensor, seed: u64) -> f64 {
        let (_, g) = f(x);
        let mut worst = 0.0f64;
        let scale = g.l2_norm();
        for k in 0..10 {
            let dir = rand_img(seed * 31 + k, x.shape(), 1.0);
            let analytic = g.dot(&dir).unwrap();
            let h = 1e-2f64;
            let mut up = x.clone();
            up.axpy(h as f32, &dir).unwrap();
            let mut down = x.clone();
            down.axpy(-h as f32, &dir).unwrap();
            let fd = (f(&up).0 - f(&down).0) / (2.0 * h);
            worst = worst.max(
                (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-2 * scale * dir.l2_norm()),
            );
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn value_and_gradient_agree_along_random_directions(seed in 0u64..10_000) {
            let x = rand_img(seed, &[1, 6, 6], 1.0);
            prop_assert!(directional_check(l2_value_grad, &x, seed) < 1e-3);
            prop_assert!(directional_check(|t| tv_value_grad(t).unwrap(), &x, seed) < 1e-3);
        }
    }
}
