//! SGD with momentum and Adam over lists of parameter tensors.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    SgdMomentum {
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        learning_rate: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub const fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::SgdMomentum { learning_rate, .. }
            | OptimizerConfig::Adam { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Step decay: the rate is multiplied by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self {
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    pub fn factor(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        (0..passed).fold(1.0, |f, _| f * self.gamma)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::constant()
    }
}

pub struct Optimizer<T> {
    config: OptimizerConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            if matches!(self.config, OptimizerConfig::Adam { .. }) {
                self.second = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            }
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::SgdMomentum {
                momentum,
                weight_decay,
                ..
            } => {
                let (mu, wd, lr) = (T::of(momentum), T::of(weight_decay), T::of(lr));
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pv, &gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        let d = gv + wd * *pv;
                        *vv = mu * *vv + d;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerConfig::Adam { weight_decay, .. } => {
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
                let bc1 = 1.0 - libm::pow(b1, self.steps as f64);
                let bc2 = 1.0 - libm::pow(b2, self.steps as f64);
                let step = T::of(lr / bc1);
                let inv_bc2 = T::of(1.0 / bc2);
                let (b1, b2, eps, wd) = (T::of(b1), T::of(b2), T::of(eps), T::of(weight_decay));
                let one = T::one();
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pv, &gv), mv), vv) in
                        p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let d = gv + wd * *pv;
                        *mv = b1 * *mv + (one - b1) * d;
                        *vv = b2 * *vv + (one - b2) * d * d;
                        *pv -= step * *mv / ((*vv * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0f64, -2.0];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1));
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [x.as_mut_slice()], &[g.as_slice()], 0.1);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut x = vec![1.0f64];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01));
        opt.step(&mut [x.as_mut_slice()], &[&[123.0]], 0.01);
        assert!((x[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let cfg = OptimizerConfig::SgdMomentum {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut x = vec![0.0f64];
        let mut opt = Optimizer::new(cfg);
        opt.step(&mut [x.as_mut_slice()], &[&[1.0]], 0.1);
        opt.step(&mut [x.as_mut_slice()], &[&[1.0]], 0.1);
        assert!((x[0] + 0.1 + 0.19).abs() < 1e-12);
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule {
            milestones: vec![2, 4],
            gamma: 0.1,
        };
        assert_eq!(s.factor(0), 1.0);
        assert!((s.factor(2) - 0.1).abs() < 1e-15);
        assert!((s.factor(5) - 0.01).abs() < 1e-15);
    }
}
