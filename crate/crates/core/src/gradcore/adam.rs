//! Adam optimizer over named parameter tensors.
//!
//! Conventional defaults (lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8) with
//! bias-corrected moment estimates. State is keyed by parameter name so it
//! can ride along in checkpoints and make resumed training bit-identical.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcore::params::ParamStore;
use crate::gradcore::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam update. Every parameter must have a gradient of matching
    /// shape; a non-finite gradient aborts with the parameter's name before
    /// any state is touched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (name, _) in params.iter() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing gradient for '{name}'")))?;
            if !grad.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let grad = &grads[name.as_str()];
            if grad.shape() != tensor.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    grad.shape(),
                    tensor.shape()
                )));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape()));
            let (md, vd, td) = (m.data_mut(), v.data_mut(), tensor.data_mut());
            for i in 0..td.len() {
                let g = grad.data()[i];
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                td[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
