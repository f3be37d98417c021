//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Params<T>, config: AdamWConfig) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One AdamW update in place using the state's current learning rate.
pub fn adamw_step<T: Scalar>(params: &mut Params<T>, grads: &Params<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "optimizer expects {} tensors, got {} gradients",
            state.m.len(),
            grads.len()
        )));
    }
    for ((p, g), m) in params.tensors().zip(grads.tensors()).zip(state.m.tensors()) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite { stage: "gradient".into(), layer: 0 });
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::c(c.beta1);
    let b2 = T::c(c.beta2);
    let bc1 = T::c(1.0 - c.beta1.powi(t));
    let bc2 = T::c(1.0 - c.beta2.powi(t));
    let lr = T::c(c.lr);
    let eps = T::c(c.eps);
    let wd = T::c(c.weight_decay);
    let one = T::one();
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi = *pi - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pi);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> Params<f64> {
        let mut p = Params::new();
        p.insert("x", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = single(1.25);
        let g = single(0.0);
        let mut s = OptimizerState::new(&p, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        adamw_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 1.25);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = single(1.0);
        let g = single(0.0);
        let mut s = OptimizerState::new(&p, AdamWConfig { lr: 0.1, weight_decay: 0.1, ..Default::default() });
        adamw_step(&mut p, &g, &mut s).unwrap();
        assert!((p.get("x").unwrap().item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn step_counter_increments() {
        let mut p = single(1.0);
        let g = single(0.5);
        let mut s = OptimizerState::new(&p, AdamWConfig::default());
        for i in 1..=3 {
            adamw_step(&mut p, &g, &mut s).unwrap();
            assert_eq!(s.step, i);
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = single(1.0);
        let g = single(f64::NAN);
        let mut s = OptimizerState::new(&p, AdamWConfig::default());
        assert!(adamw_step(&mut p, &g, &mut s).is_err());
        assert_eq!(s.step, 0);
    }
}
