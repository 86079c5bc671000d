//! Adam with decoupled weight decay and the two learning-rate schedules.

use crate::nnet::Real;

use super::config::ScheduleKind;

/// Adam moment state over the flat trainable vector. Moments are kept in
/// f64 independent of network precision.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. `decay_mask[i]` selects which coordinates receive the
    /// decoupled weight decay (matrix weights; biases and gains are
    /// excluded).
    pub fn step<F: Real>(
        &mut self,
        params: &mut [F],
        grads: &[F],
        lr: f64,
        weight_decay: f64,
        decay_mask: &[bool],
    ) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].to64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut update = lr * m_hat / (v_hat.sqrt() + self.eps);
            if weight_decay > 0.0 && decay_mask[i] {
                update += lr * weight_decay * params[i].to64();
            }
            params[i] = F::of(params[i].to64() - update);
        }
    }
}

/// Learning rate at `step` of `total`.
pub fn lr_at(kind: ScheduleKind, base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    match kind {
        ScheduleKind::Constant => base,
        ScheduleKind::WarmupCosine => {
            if warmup > 0 && step < warmup {
                base * (step + 1) as f64 / warmup as f64
            } else {
                let span = (total.saturating_sub(warmup)).max(1) as f64;
                let progress = (step.saturating_sub(warmup)) as f64 / span;
                base * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
        }
    }
}
