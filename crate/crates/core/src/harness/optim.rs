//! Momentum-free adaptive optimizer with decoupled weight decay, and the
//! cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-element step `lr · g / (sqrt(v̂) + eps)` with `v` an exponential
/// average of `g²` (bias corrected); weights of rank ≥ 2 also shrink by
/// `lr · weight_decay · θ`. Updated values are rounded to `f32`.
pub struct Optimizer {
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            second: store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let correction = 1.0 - self.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for (id, grad) in grads {
            let value = store.get(*id);
            let decay = if value.rank() >= 2 { self.weight_decay } else { 0.0 };
            let v = &mut self.second[id.index()];
            let data: Vec<f64> = value
                .data()
                .iter()
                .zip(grad.data())
                .zip(v.iter_mut())
                .map(|((&theta, &g), v)| {
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let vhat = *v / correction;
                    let next = theta - lr * (g / (vhat.sqrt() + self.eps) + decay * theta);
                    f64::from(next as f32)
                })
                .collect();
            store.set(*id, Tensor::new(value.shape().to_vec(), data)?)?;
        }
        Ok(())
    }
}

/// `base · ½(1 + cos(π t / total))`, reaching zero at `t = total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + libm::cos(PI * t))
}
