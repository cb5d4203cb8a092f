//! Named parameters and the Adam optimizer with a warmup + cosine-decay
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named, trainable (or frozen) leaf tensor.
///
/// Frozen-ness is exactly the tensor's `requires_grad` flag inverted: a
/// frozen parameter accumulates no gradient and is skipped by the optimizer,
/// so its data is bitwise invariant under any number of steps. Cloning shares
/// the underlying tensor.
#[derive(Clone)]
pub struct Parameter<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    /// Wraps a tensor as a trainable parameter.
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        tensor.set_requires_grad(true);
        Parameter {
            name: name.into(),
            tensor,
        }
    }

    /// Stable identifier used by the optimizer state and checkpoints.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// The underlying tensor.
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    /// Excludes this parameter from gradient flow and optimizer updates.
    pub fn freeze(&self) {
        self.tensor.set_requires_grad(false);
    }

    /// Re-enables gradient flow and optimizer updates.
    pub fn unfreeze(&self) {
        self.tensor.set_requires_grad(true);
    }

    /// Whether the optimizer is barred from touching this parameter.
    pub fn is_frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }

    /// FNV-1a hash of the raw data bits; used to assert bitwise invariance
    /// of frozen parameters across training steps.
    pub fn data_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.tensor.to_vec() {
            let bits = v.to_bits_u64();
            for shift in [0u32, 8, 16, 24, 32, 40, 48, 56] {
                h ^= (bits >> shift) & 0xff;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Resets gradients on every parameter (zeros for trainable, cleared for
/// frozen). Call once per step before building the loss graph.
pub fn zero_grads<T: Scalar>(params: &[Parameter<T>]) {
    for p in params {
        p.tensor().zero_grad();
    }
}

/// Scales all trainable gradients so their joint L2 norm is at most
/// `max_norm`; returns the pre-clip norm. Norm accumulation runs in slice
/// order, elementwise ascending, so it is deterministic.
pub fn clip_global_norm<T: Scalar>(params: &[Parameter<T>], max_norm: f64) -> Result<f64> {
    let mut total = 0.0f64;
    for p in params {
        if p.is_frozen() {
            continue;
        }
        let grad = p
            .tensor()
            .grad()
            .ok_or_else(|| TensorError::MissingGrad(p.name().to_string()))?;
        for g in grad {
            let g = g.to_f64_c();
            total += g * g;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = T::from_f64_c(max_norm / norm);
        for p in params {
            if !p.is_frozen() {
                p.tensor().scale_grad(factor);
            }
        }
    }
    Ok(norm)
}

/// Hyperparameters of [`Adam`], including its learning-rate schedule.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr_max: f64,
    /// Total scheduled steps; the rate decays to zero here.
    pub total_steps: usize,
    /// Linear warmup steps before the cosine phase.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Standard moment coefficients; only the schedule varies per run.
    pub fn new(lr_max: f64, total_steps: usize, warmup_steps: usize) -> Self {
        AdamConfig {
            lr_max,
            total_steps,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Learning rate at a zero-based step index.
    ///
    /// Steps `0..warmup` ramp linearly to `lr_max` (the first step is already
    /// nonzero); the remaining steps follow a half-cosine from `lr_max` down
    /// to 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr_max * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.lr_max;
        }
        let s = step - self.warmup_steps;
        if s >= span {
            return 0.0;
        }
        let phase = std::f64::consts::PI * s as f64 / span as f64;
        self.lr_max * 0.5 * (1.0 + phase.cos())
    }
}

/// Adam with bias correction. Moment buffers exist only for parameters that
/// were trainable when first stepped; frozen parameters are never read from
/// or written to.
pub struct Adam<T: Scalar> {
    config: AdamConfig,
    step: usize,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Zero-based index of the next step to run.
    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Learning rate the next [`Adam::step`] call will use.
    pub fn next_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update to every trainable parameter.
    ///
    /// Requires a populated gradient on each of them (run `backward` first);
    /// a missing gradient is a state error and leaves the step counter
    /// untouched.
    pub fn step(&mut self, params: &[Parameter<T>]) -> Result<()> {
        for p in params {
            if !p.is_frozen() && p.tensor().grad().is_none() {
                return Err(TensorError::MissingGrad(p.name().to_string()));
            }
        }

        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.config.beta1.powi(t);
        let bias2 = 1.0 - self.config.beta2.powi(t);
        let b1 = T::from_f64_c(self.config.beta1);
        let b2 = T::from_f64_c(self.config.beta2);
        let one_minus_b1 = T::from_f64_c(1.0 - self.config.beta1);
        let one_minus_b2 = T::from_f64_c(1.0 - self.config.beta2);
        let inv_bias1 = T::from_f64_c(1.0 / bias1);
        let inv_bias2 = T::from_f64_c(1.0 / bias2);
        let lr_t = T::from_f64_c(lr);
        let eps = T::from_f64_c(self.config.eps);

        for p in params {
            if p.is_frozen() {
                continue;
            }
            let grad = p.tensor().grad().expect("checked above");
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            debug_assert_eq!(m.len(), grad.len(), "parameter shape changed mid-run");
            p.tensor().update_data(|data| {
                for i in 0..grad.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + one_minus_b1 * g;
                    v[i] = b2 * v[i] + one_minus_b2 * g * g;
                    let m_hat = m[i] * inv_bias1;
                    let v_hat = v[i] * inv_bias2;
                    data[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}
