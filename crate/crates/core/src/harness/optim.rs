//! Gradient descent with momentum, and Adam.

use std::f64::consts::PI;

use crate::harness::config::{LrSchedule, OptimizerConfig, OptimizerKind};
use crate::tensor::{Module, Parameter};

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    lr_scale: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            t: 0,
            lr_scale: 1.0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Sets the rate multiplier for step `step` of `total` (1-based).
    pub fn schedule(&mut self, step: usize, total: usize) {
        self.lr_scale = match self.cfg.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (PI * (step - 1) as f64 / total.max(1) as f64).cos()),
        };
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Returns the gradient norm before clipping.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) -> f64 {
        let mut sq = 0.0;
        model.visit_params(&mut |p: &Parameter| {
            if p.trainable {
                sq += p.grad().iter().map(|g| g * g).sum::<f64>();
            }
        });
        let norm = sq.sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let cfg = self.cfg;
        let t = self.t as i32;
        let lr = cfg.learning_rate * self.lr_scale;
        let (first, second) = (&mut self.first, &mut self.second);
        let mut idx = 0;
        model.visit_params_mut(&mut |p: &mut Parameter| {
            if !p.trainable {
                return;
            }
            let g: Vec<f64> = p.grad().iter().map(|g| g * clip).collect();
            if first.len() <= idx {
                first.push(vec![0.0; g.len()]);
                second.push(vec![0.0; g.len()]);
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            let values = p.tensor.values_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for i in 0..g.len() {
                        m[i] = cfg.momentum * m[i] + g[i];
                        values[i] -= lr * m[i];
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - cfg.beta1.powi(t);
                    let c2 = 1.0 - cfg.beta2.powi(t);
                    for i in 0..g.len() {
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                        values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
                    }
                }
            }
            p.zero_grad();
            idx += 1;
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct One(Parameter);

    impl Module for One {
        fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
            f(&self.0);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
            f(&mut self.0);
        }
    }

    fn minimise(kind: OptimizerKind) -> f64 {
        let mut m = One(Parameter::new("x", Tensor::full(&[1], 3.0)));
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            learning_rate: 0.05,
            ..OptimizerConfig::default()
        });
        for _ in 0..500 {
            let x = m.0.values()[0];
            m.0.accumulate(&[2.0 * (x - 1.0)]);
            opt.step(&mut m);
        }
        m.0.values()[0]
    }

    #[test]
    fn both_kinds_reach_minimum() {
        assert!((minimise(OptimizerKind::Sgd) - 1.0).abs() < 1e-6);
        assert!((minimise(OptimizerKind::Adam) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn cosine_schedule_ends_near_zero() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.schedule(1, 100);
        assert_eq!(opt.lr_scale, 1.0);
        opt.schedule(51, 100);
        assert!((opt.lr_scale - 0.5).abs() < 1e-12);
        opt.schedule(100, 100);
        assert!(opt.lr_scale > 0.0 && opt.lr_scale < 1e-3);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut m = One(Parameter::new("x", Tensor::full(&[2], 3.0)));
            let mut opt = Optimizer::new(OptimizerConfig { kind, ..OptimizerConfig::default() });
            for _ in 0..3 {
                m.0.accumulate(&[0.0, 0.0]);
                opt.step(&mut m);
            }
            assert_eq!(m.0.values(), &[3.0, 3.0]);
        }
    }
}
