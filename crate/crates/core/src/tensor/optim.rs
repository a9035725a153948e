use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps; 0 keeps the learning rate constant.
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamConfig {
            learning_rate,
            weight_decay,
            ..Default::default()
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) || config.weight_decay < 0.0 {
            return Err(invalid(format!(
                "learning rate must be > 0 and weight decay ≥ 0 (got {}, {})",
                config.learning_rate, config.weight_decay
            )));
        }
        Ok(OptimState {
            config,
            step: 0,
            first: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            second: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 {
            c.learning_rate
        } else {
            c.learning_rate * ((self.step + 1) as f64 / c.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if !store.has_grad() {
            return Err(Error::MissingGradients);
        }
        if store.len() != self.first.len() {
            return Err(invalid(
                "optimizer state was built for a different parameter set",
            ));
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::ONE - b1, T::ONE - b2);
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);

        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((w, &g), mi), vi) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *w *= decay;
                *mi = b1 * *mi + ob1 * g;
                *vi = b2 * *vi + ob2 * g * g;
                *w -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
            p.value.ensure_finite("optimizer_step")?;
        }
        store.zero_grad();
        Ok(())
    }
}
