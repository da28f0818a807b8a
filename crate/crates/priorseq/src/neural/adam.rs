//! Adam optimizer with bias correction, keyed by tensor name.

use super::{NamedTensors, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// One bias-corrected Adam step over every named tensor. Fails fast on
    /// non-finite gradients.
    pub fn update<P: NamedTensors>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        for name in params.tensor_names() {
            if !grads.tensor(&name).all_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for name in params.tensor_names() {
            let g = grads.tensor(&name);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = params.tensor_mut(&name);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    pub fn moment_entries(&self) -> impl Iterator<Item = (&String, &(Tensor, Tensor))> {
        self.moments.iter()
    }

    pub fn insert_moments(&mut self, name: String, m: Tensor, v: Tensor) {
        self.moments.insert(name, (m, v));
    }
}
