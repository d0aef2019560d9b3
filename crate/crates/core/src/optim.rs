//! RMSProp with momentum.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsPropConfig {
    pub lr: f32,
    /// Decay of the squared-gradient accumulator.
    pub rho: f32,
    pub momentum: f32,
    pub eps: f32,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            rho: 0.9,
            momentum: 0.9,
            eps: 1e-8,
        }
    }
}

impl RmsPropConfig {
    pub fn describe(&self) -> String {
        format!(
            "rmsprop(lr={},rho={},momentum={},eps={})",
            self.lr, self.rho, self.momentum, self.eps
        )
    }
}

/// ```text
/// s ← ρ s + (1 − ρ) g²
/// u ← γ u + lr · g / √(s + ε)
/// θ ← θ − u
/// ```
#[derive(Debug, Clone)]
pub struct RmsProp {
    cfg: RmsPropConfig,
    mean_square: Vec<Vec<Vec<f32>>>,
    velocity: Vec<Vec<Vec<f32>>>,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig, params: &[Vec<Tensor>]) -> Self {
        let zeros: Vec<Vec<Vec<f32>>> = params
            .iter()
            .map(|g| g.iter().map(|t| vec![0.0; t.len()]).collect())
            .collect();
        Self {
            cfg,
            mean_square: zeros.clone(),
            velocity: zeros,
        }
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut [Vec<Tensor>], grads: &[Vec<Tensor>]) -> Result<()> {
        let RmsPropConfig {
            lr,
            rho,
            momentum,
            eps,
        } = self.cfg;
        for (((pg, gg), sg), vg) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.mean_square)
            .zip(&mut self.velocity)
        {
            for (((p, g), s), v) in pg.iter_mut().zip(gg).zip(sg).zip(vg) {
                for (((w, &gr), sq), vel) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(s.iter_mut())
                    .zip(v.iter_mut())
                {
                    *sq = rho * *sq + (1.0 - rho) * gr * gr;
                    *vel = momentum * *vel + lr * gr / (*sq + eps).sqrt();
                    *w -= *vel;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_computation() {
        let mut params = vec![vec![Tensor::from_vec(vec![1.0, -1.0])]];
        let grads = vec![vec![Tensor::from_vec(vec![0.5, 0.0])]];
        let cfg = RmsPropConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let mut opt = RmsProp::new(cfg, &params);
        opt.step(&mut params, &grads).unwrap();
        // s = 0.1 * 0.25, u = 1e-3 * 0.5 / sqrt(0.025 + 1e-8)
        let u = 1e-3 * 0.5 / (0.025f32 + 1e-8).sqrt();
        assert!((params[0][0].data()[0] - (1.0 - u)).abs() < 1e-7);
        assert_eq!(params[0][0].data()[1], -1.0);
        // momentum carries the previous step
        opt.step(&mut params, &grads).unwrap();
        let s2 = 0.9 * 0.025 + 0.1 * 0.25f32;
        let u2 = 0.9 * u + 1e-3 * 0.5 / (s2 + 1e-8).sqrt();
        assert!((params[0][0].data()[0] - (1.0 - u - u2)).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut params = vec![vec![Tensor::from_vec(vec![3.0, -2.0])]];
        let mut opt = RmsProp::new(
            RmsPropConfig {
                lr: 1e-2,
                ..Default::default()
            },
            &params,
        );
        for _ in 0..2000 {
            let g = params[0][0].scale(2.0);
            opt.step(&mut params, &[vec![g]]).unwrap();
        }
        assert!(params[0][0].l2_norm() < 0.05);
    }
}
