//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimiser and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_max_norm: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// Metric rows are written every `log_every` steps and at the last step.
    pub log_every: usize,
    /// Periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            steps: 20_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_max_norm: 1.0,
            cosine_decay: true,
            log_every: 500,
            checkpoint_every: 0,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.clip_max_norm > 0.0) {
            return Err(Error::Config("eps and clip_max_norm must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used for the update that completes step `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine_decay || self.steps == 0 {
            return self.lr;
        }
        let frac = (step - 1) as f64 / self.steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Rescales `grad` in place so that its Euclidean norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, spec: &OptimizerSpec) -> Self {
        Self {
            beta1: spec.beta1,
            beta2: spec.beta2,
            eps: spec.eps,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected update of `params` along `grad`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let spec = OptimizerSpec { lr: 0.0, ..Default::default() };
        let mut adam = Adam::new(3, &spec);
        let mut p = vec![0.5, -1.0, 2.0];
        for _ in 0..50 {
            adam.update(&mut p, &[1.0, -3.0, 0.25], spec.lr_at(1));
        }
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(adam.step_count(), 50);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let spec = OptimizerSpec { eps: 1e-300, ..Default::default() };
        let mut adam = Adam::new(2, &spec);
        let mut p = vec![0.0, 0.0];
        adam.update(&mut p, &[4.0, -0.01], 0.1);
        assert!((p[0] + 0.1).abs() < 1e-12);
        assert!((p[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let spec = OptimizerSpec { lr: 0.05, cosine_decay: true, steps: 2000, ..Default::default() };
        let mut adam = Adam::new(2, &spec);
        let mut p = vec![3.0, -2.0];
        for s in 1..=spec.steps {
            let g = vec![2.0 * (p[0] - 1.0), 8.0 * (p[1] + 0.5)];
            adam.update(&mut p, &g, spec.lr_at(s));
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let spec = OptimizerSpec { lr: 2.0, steps: 4, cosine_decay: true, ..Default::default() };
        assert_eq!(spec.lr_at(1), 2.0);
        assert!((spec.lr_at(3) - 1.0).abs() < 1e-15);
        assert!(spec.lr_at(4) > 0.0);
    }

    proptest! {
        #[test]
        fn clipping_bounds_norm_and_keeps_direction(
            g in proptest::collection::vec(-100.0..100.0f64, 1..20),
            max in 0.01..10.0f64,
        ) {
            let mut c = g.clone();
            let before = clip_grad_norm(&mut c, max);
            let after = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(after <= max * (1.0 + 1e-12));
            if before <= max {
                prop_assert_eq!(&c, &g);
            } else {
                let scale = max / before;
                for (a, b) in c.iter().zip(&g) {
                    prop_assert!((a - b * scale).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }
    }
}
