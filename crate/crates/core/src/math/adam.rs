use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Mc3Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub(crate) m: Matrix,
    pub(crate) v: Matrix,
    pub(crate) step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, rows: usize, cols: usize) -> Self {
        AdamState {
            config,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &Matrix) -> Self {
        AdamState::new(config, params.rows(), params.cols())
    }

    pub(crate) fn from_parts(config: AdamConfig, m: Matrix, v: Matrix, step: u64) -> Result<Self> {
        m.same_shape(&v)?;
        Ok(AdamState { config, m, v, step })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Matrix {
        &self.m
    }

    pub fn second_moment(&self) -> &Matrix {
        &self.v
    }

    /// Applies one update to `params` in place.
    pub fn update(&mut self, params: &mut Matrix, grads: &Matrix) -> Result<()> {
        params.same_shape(grads)?;
        self.m.same_shape(params)?;
        if grads.as_slice().iter().any(|g| !g.is_finite()) {
            return Err(Mc3Error::NonFiniteGradient);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (((p, g), mi), vi) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        params.check_finite("parameters after Adam step")
    }
}

/// Functional form: returns the updated parameters and advances `state`.
pub fn adam_step(state: &mut AdamState, params: &Matrix, grads: &Matrix) -> Result<Matrix> {
    let mut out = params.clone();
    state.update(&mut out, grads)?;
    Ok(out)
}
