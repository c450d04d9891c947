use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self::with_betas(num_params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(num_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One descent step on `params` along `grads`. Nothing is modified on error.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        ensure_dim("adam parameter vector", self.m.len(), params.len())?;
        ensure_dim("adam gradient vector", self.m.len(), grads.len())?;
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "adam gradient",
                index,
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// One ascent step (descent on the negated gradient).
    pub fn ascend(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let neg: Vec<f64> = grads.iter().map(|g| -g).collect();
        self.step(params, &neg)
    }
}
