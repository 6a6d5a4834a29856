//! Adam with bias correction and a step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every parameter of one [`ParamStore`], in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter. A parameter without an accumulated
    /// gradient is treated as having a zero gradient. Gradients are left in
    /// place; clearing them is the caller's job.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of_f64(beta1), T::of_f64(beta2));
        let (one_b1, one_b2) = (T::of_f64(1.0 - beta1), T::of_f64(1.0 - beta2));
        let (bc1, bc2, eps, lr) = (
            T::of_f64(bc1),
            T::of_f64(bc2),
            T::of_f64(eps),
            T::of_f64(lr),
        );
        for i in 0..store.len() {
            let (value, grad) = store.value_and_grad_mut(ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.shape() != value.shape() {
                return Err(Error::shape("adam_step", value.shape(), m.shape()));
            }
            if let Some(g) = grad {
                if g.shape() != value.shape() {
                    return Err(Error::shape("adam_step", value.shape(), g.shape()));
                }
            }
            let grad = grad.map(Tensor::data);
            for j in 0..value.len() {
                let g = grad.map_or(T::zero(), |g| g[j]);
                let mj = b1 * m.data()[j] + one_b1 * g;
                let vj = b2 * v.data()[j] + one_b2 * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                value.data_mut()[j] = value.data()[j] - step;
            }
        }
        Ok(())
    }
}

/// `base · 0.5^⌊epoch / 5⌋`.
pub fn lr_at(epoch: usize, base: f64) -> f64 {
    StepSchedule::new(base, 5).lr_at(epoch)
}

/// Learning rate halved at every `halve_every`-epoch boundary; a period of
/// zero keeps it constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base: f64,
    pub halve_every: usize,
}

impl StepSchedule {
    pub fn new(base: f64, halve_every: usize) -> Self {
        Self { base, halve_every }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.halve_every == 0 {
            return self.base;
        }
        let halvings = (epoch / self.halve_every).min(i32::MAX as usize) as i32;
        self.base * 0.5f64.powi(halvings)
    }
}
