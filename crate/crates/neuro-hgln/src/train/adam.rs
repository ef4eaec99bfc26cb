//! Bias-corrected Adam keyed by parameter name, so ablated runs simply never
//! register the disabled parameters.

use super::TrainError;
use crate::autodiff::Tape;
use crate::model::{BoundModel, ModelParams};
use std::collections::HashMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over explicit (name, param, grad) triples. Fails if any
    /// named parameter arrives without its gradient.
    pub fn step<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a mut [f64], Option<&'a [f64]>)>,
        lr: f64,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (name, param, grad) in entries {
            let grad = grad.ok_or_else(|| TrainError::MissingGradient {
                name: name.to_string(),
            })?;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Read gradients for every bound parameter off the tape, update the
    /// host parameters, then zero the tape's gradients.
    pub fn apply_from_tape(
        &mut self,
        tape: &mut Tape,
        bound: &BoundModel,
        params: &mut ModelParams,
        lr: f64,
    ) -> Result<(), TrainError> {
        let mut grads: HashMap<&str, Vec<f64>> = HashMap::new();
        for (name, id) in &bound.names {
            let g = tape
                .grad(*id)
                .ok_or_else(|| TrainError::MissingGradient { name: name.clone() })?;
            grads.insert(name.as_str(), g.to_vec());
        }
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        params.for_each_mut(|name, tensor| {
            let Some(grad) = grads.get(name) else {
                return;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; tensor.data.len()], vec![0.0; tensor.data.len()]));
            for i in 0..tensor.data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        });
        tape.zero_grads();
        Ok(())
    }

    /// Moment vectors for a parameter, if it has ever been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (&m[..], &v[..]))
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) {
        self.moments.insert(name.to_string(), (m, v));
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}
