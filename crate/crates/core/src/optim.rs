//! Step rules and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr · (1 − iter / total)^power`
    Poly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub poly_power: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 2e-3,
            schedule: LrSchedule::Poly,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one or two moment buffers per parameter, in parameter
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    total_iterations: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, total_iterations: u64) -> Self {
        Self { config, total_iterations, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn total_iterations(&self) -> u64 {
        self.total_iterations
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.config.schedule {
            LrSchedule::Constant => self.config.lr,
            LrSchedule::Poly => {
                let frac = (iteration as f64 / self.total_iterations.max(1) as f64).min(1.0);
                self.config.lr * (1.0 - frac).powf(self.config.poly_power)
            }
        }
    }

    /// Applies one update using the accumulated gradients; gradients are
    /// left untouched.
    pub fn step(&mut self, params: Vec<(String, &mut Param<T>)>, iteration: u64) {
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
            if self.config.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        assert_eq!(self.first.len(), params.len(), "parameter set changed between steps");
        self.steps += 1;
        let c = &self.config;
        let lr = T::of(self.lr_at(iteration));
        let wd = T::of(c.weight_decay);
        match c.kind {
            OptimizerKind::Sgd => {
                let mu = T::of(c.momentum);
                for ((_, p), buf) in params.into_iter().zip(self.first.iter_mut()) {
                    let grad = p.grad.as_slice().expect("contiguous grad");
                    let value = p.value.as_slice_mut().expect("contiguous value");
                    for ((v, &g), m) in value.iter_mut().zip(grad).zip(buf.iter_mut()) {
                        let g = g + wd * *v;
                        *m = mu * *m + g;
                        *v -= lr * *m;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
                let t = self.steps as i32;
                let bc1 = T::one() - b1.powi(t);
                let bc2 = T::one() - b2.powi(t);
                for (((_, p), m1), m2) in params.into_iter().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
                    let grad = p.grad.as_slice().expect("contiguous grad");
                    let value = p.value.as_slice_mut().expect("contiguous value");
                    for (((v, &g), a), b) in value.iter_mut().zip(grad).zip(m1.iter_mut()).zip(m2.iter_mut()) {
                        *a = b1 * *a + (T::one() - b1) * g;
                        *b = b2 * *b + (T::one() - b2) * g * g;
                        let update = (*a / bc1) / ((*b / bc2).sqrt() + eps);
                        *v -= lr * (update + wd * *v);
                    }
                }
            }
        }
    }

    /// Moment buffers for checkpointing: `(first, second)`.
    pub fn state(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    pub fn restore(
        config: OptimizerConfig,
        total_iterations: u64,
        steps: u64,
        first: Vec<Vec<T>>,
        second: Vec<Vec<T>>,
    ) -> Result<Self> {
        if config.kind == OptimizerKind::Sgd && !second.is_empty() {
            return Err(Error::Checkpoint("SGD state carries second moments".into()));
        }
        Ok(Self { config, total_iterations, first, second, steps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn param(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new(ArrayD::from_elem(IxDyn(&[1]), v));
        p.grad.fill(g);
        p
    }

    #[test]
    fn poly_schedule_decays_to_zero() {
        let opt = Optimizer::<f64>::new(OptimizerConfig { lr: 0.01, ..Default::default() }, 100);
        assert_eq!(opt.lr_at(0), 0.01);
        assert!((opt.lr_at(50) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(opt.lr_at(100), 0.0);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            schedule: LrSchedule::Constant,
            momentum: 0.5,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, 10);
        let mut p = param(1.0, 2.0);
        opt.step(vec![("p".into(), &mut p)], 0);
        assert!((p.value[[0]] - 0.8).abs() < 1e-12);
        opt.step(vec![("p".into(), &mut p)], 1);
        // buffer = 0.5·2 + 2 = 3
        assert!((p.value[[0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = OptimizerConfig { lr: 0.01, schedule: LrSchedule::Constant, weight_decay: 0.0, ..Default::default() };
        let mut opt = Optimizer::new(cfg, 10);
        let mut p = param(1.0, -3.0);
        opt.step(vec![("p".into(), &mut p)], 0);
        assert!((p.value[[0]] - 1.01).abs() < 1e-6);
    }
}
