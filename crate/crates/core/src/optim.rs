//! Adam and the cosine schedule with decaying warm restarts.

use alloc::{vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;

/// Learning rate at optimizer step `step`.
///
/// Cycle `k` lasts `cycle_len * cycle_mult^k` steps and starts from
/// `lr0 * decay^k`; inside a cycle the rate follows a half cosine down to
/// `lr_min`.
pub fn cosine_restart_lr(step: u64, cycle_len: u64, cycle_mult: f64, lr0: f64, lr_min: f64, decay: f64) -> f64 {
    assert!(cycle_len > 0, "cycle length must be positive");
    let (k, pos, len) = if cycle_mult == 1.0 {
        (step / cycle_len, (step % cycle_len) as f64, cycle_len as f64)
    } else {
        let mut s = step as f64;
        let mut len = cycle_len as f64;
        let mut k = 0u64;
        while s >= len {
            s -= len;
            len *= cycle_mult;
            k += 1;
        }
        (k, s, len)
    };
    let peak = lr0 * libm::pow(decay, k as f64);
    lr_min + (peak - lr_min) * (1.0 + libm::cos(core::f64::consts::PI * pos / len)) / 2.0
}

pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    cosine_restart_lr(step, cfg.cycle_len, cfg.cycle_mult, cfg.lr, cfg.lr_min, cfg.restart_decay)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected update. Weight decay, when non-zero, is added to
    /// the gradient.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for i in 0..params.len() {
            let mut g = f64::from(grads[i]);
            if self.weight_decay != 0.0 {
                g += self.weight_decay * f64::from(params[i]);
            }
            let m = self.beta1 * f64::from(self.m[i]) + (1.0 - self.beta1) * g;
            let v = self.beta2 * f64::from(self.v[i]) + (1.0 - self.beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let update = lr * (m / bc1) / (libm::sqrt(v / bc2) + self.eps);
            params[i] = (f64::from(params[i]) - update) as f32;
        }
    }
}
