//! Adam optimizer with bias correction.

use crate::params::ParamSet;
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers are allocated to match `params`; the set's order and
    /// shapes must not change between steps.
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { config, t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter. Requires populated gradients and
    /// zeroes them afterwards.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), TensorError> {
        for (name, tensor) in params.iter() {
            if tensor.grad.is_none() {
                return Err(TensorError::MissingGrad { name: name.to_string() });
            }
        }
        self.t += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (idx, (_, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor.grad.as_ref().expect("checked above");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
