//! Warmup + cosine learning-rate schedule and AdamW.

use alloc::vec;
use alloc::vec::Vec;

use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Linear ramp `0 -> base_lr` over the warmup, then cosine decay
    /// reaching zero at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps);
        if decay == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

/// Adam with decoupled weight decay. Parameters flagged `decay == false`
/// (norm gains, biases) are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every parameter from its accumulated `grad`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        if self.m.is_empty() {
            for (_, p) in store.iter() {
                self.m.push(vec![0.0; p.value.numel()]);
                self.v.push(vec![0.0; p.value.numel()]);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (i, p) in store.iter_mut().enumerate() {
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let gj = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= lr * decay * value[j];
                value[j] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}
