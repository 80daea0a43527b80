//! Finite-difference gradient oracle.
//!
//! Central differences over forward evaluations only — deliberately
//! independent of the tape's backward rules so it can vouch for them. The
//! step is scaled by each entry's magnitude; with the default 1e-5 step,
//! well-conditioned analytic gradients should agree to ~1e-7 relative, so
//! tests asserting 1e-4 have real margin.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcore::params::ParamStore;
use crate::gradcore::tensor::Tensor;

/// Central-difference gradients of `f` with respect to every entry of every
/// parameter. `f` must be a pure function of the store.
pub fn finite_difference<F>(
    mut f: F,
    params: &ParamStore,
    step: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Contract("finite_difference: step must be positive".into()));
    }
    let mut out = BTreeMap::new();
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let mut grad = vec![0.0; tensor.numel()];
        for i in 0..tensor.numel() {
            let x = tensor.data()[i];
            let h = step * x.abs().max(1.0);
            probe.get_mut(name)?.data_mut()[i] = x + h;
            let up = f(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = x - h;
            let down = f(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = x;
            grad[i] = (up - down) / (2.0 * h);
        }
        out.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest relative disagreement between two gradient maps, where each
/// entry's denominator is `max(|a|, |b|, 1e-6)` so near-zero gradients are
/// compared absolutely.
pub fn max_relative_error(
    a: &BTreeMap<String, Tensor>,
    b: &BTreeMap<String, Tensor>,
) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Contract("gradient maps hold different parameters".into()));
    }
    let mut worst: f64 = 0.0;
    for (name, ta) in a {
        let tb = &b[name];
        if ta.shape() != tb.shape() {
            return Err(Error::Contract(format!("gradient shapes differ for '{name}'")));
        }
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}
