//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

/// `lr0 * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Parameters this optimizer updates, in store order.
    trainable: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, trainable: Vec<ParamId>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let m: Vec<Vec<f64>> = trainable
            .iter()
            .map(|&id| vec![0.0; store.tensor(id).len()])
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            v: m.clone(),
            m,
            trainable,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update from the gradients currently accumulated in `store`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for &id in &self.trainable {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: store.get(id).name.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let shrink = 1.0 - lr * self.weight_decay;
        for (slot, &id) in self.trainable.iter().enumerate() {
            let grad = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let p = store.tensor_mut(id).data_mut();
            for k in 0..p.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] * shrink - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
