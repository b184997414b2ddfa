use serde::Serialize;

use crate::config::OptimConfig;
use crate::encoder::{EncoderParams, ParamRole};
use crate::scalar::Scalar;

/// Linear warmup then half-cosine decay, in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(optim: &OptimConfig, batch_size: usize, steps_per_epoch: usize) -> Self {
        Self {
            peak: optim.peak_lr(batch_size),
            warmup_steps: optim.warmup_epochs * steps_per_epoch,
            total_steps: optim.total_epochs * steps_per_epoch,
        }
    }

    /// `peak * step / warmup` during warmup, then
    /// `peak * 0.5 * (1 + cos(pi * progress))`, reaching 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW with decoupled weight decay. Moment buffers are kept for every
/// tensor of [`EncoderParams::tensors`], empty for buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates taken so far.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// One moment slot per entry of `sizes`; use 0 for arrays the optimizer
    /// never updates.
    pub fn with_sizes(sizes: impl IntoIterator<Item = usize>, config: &OptimConfig) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            beta1: config.betas.0,
            beta2: config.betas.1,
            eps: config.eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn new(params: &EncoderParams<T>, config: &OptimConfig) -> Self {
        Self::with_sizes(
            params
                .tensors()
                .iter()
                .map(|p| if p.role.trainable() { p.data.len() } else { 0 }),
            config,
        )
    }

    /// Updates each `(role, values, gradient)` slot in order; slot `i` uses
    /// moment buffers `i`. Buffers are skipped.
    pub fn update<'a>(&mut self, slots: impl IntoIterator<Item = (ParamRole, &'a mut [T], &'a [T])>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - lr * self.weight_decay);
        for (i, (role, values, g)) in slots.into_iter().enumerate() {
            if !role.trainable() {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let apply_decay = role == ParamRole::Decay;
            for k in 0..values.len() {
                m[k] = b1 * m[k] + one_b1 * g[k];
                v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
                let denom = v[k].sqrt() * inv_bc2_sqrt + eps;
                if apply_decay {
                    values[k] *= decay;
                }
                values[k] -= step_size * m[k] / denom;
            }
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams<T>, grads: &EncoderParams<T>, lr: f64) {
        let g = grads.tensors();
        let slots = params
            .tensors_mut()
            .into_iter()
            .zip(g)
            .map(|(p, g)| (p.role, p.data, g.data));
        self.update(slots, lr);
    }
}
