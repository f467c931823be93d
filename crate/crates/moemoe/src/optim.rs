//! Adam with bias correction and the step learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Parameter, Result, TensorError};

/// Hyperparameters plus per-parameter moment buffers.
///
/// The effective learning rate at a given epoch is
/// `base_lr * decay_factor^(number of decay epochs <= epoch)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub moments: HashMap<String, MomentPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentPair {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(base_lr: f64, decay_factor: f64, decay_epochs: Vec<usize>) -> Self {
        AdamState {
            step: 0,
            base_lr,
            decay_factor,
            decay_epochs,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            moments: HashMap::new(),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base_lr * self.decay_factor.powi(hits as i32)
    }

    /// Advance the step counter and fix the scales for one update.
    pub fn begin_step(&mut self, epoch: usize) -> StepScale {
        let lr = self.lr_at(epoch);
        self.step += 1;
        let t = self.step as i32;
        StepScale {
            lr,
            bias1: 1.0 - self.beta1.powi(t),
            bias2: 1.0 - self.beta2.powi(t),
        }
    }

    /// Update one parameter under the current step's scales. Non-trainable
    /// parameters are left untouched; gradients are cleared either way.
    pub fn update_param(&mut self, p: &mut Parameter, scale: &StepScale) -> Result<()> {
        if !p.trainable {
            p.zero_grad();
            return Ok(());
        }
        let grad = p
            .value
            .grad
            .take()
            .ok_or_else(|| TensorError::MissingGrad {
                name: p.name.clone(),
            })?;
        let n = grad.len();
        let pair = self
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| MomentPair {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        let data = p.value.data_mut();
        for i in 0..n {
            pair.m[i] = self.beta1 * pair.m[i] + (1.0 - self.beta1) * grad[i];
            pair.v[i] = self.beta2 * pair.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = pair.m[i] / scale.bias1;
            let v_hat = pair.v[i] / scale.bias2;
            data[i] -= scale.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }

    /// One Adam update over every trainable parameter. Gradients must be
    /// populated beforehand and are cleared afterwards on all parameters.
    pub fn step_params(&mut self, params: &mut [&mut Parameter], epoch: usize) -> Result<()> {
        let scale = self.begin_step(epoch);
        for p in params.iter_mut() {
            self.update_param(p, &scale)?;
        }
        Ok(())
    }
}

/// Learning rate and bias corrections for one optimizer step.
pub struct StepScale {
    pub lr: f64,
    pub bias1: f64,
    pub bias2: f64,
}
