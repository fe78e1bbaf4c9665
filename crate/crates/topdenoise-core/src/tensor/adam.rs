//! Adam optimizer with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::ParamSet;
use crate::{Error, Result};

/// Step size and moment decay settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair of buffers per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    // Running beta powers; multiplying per step avoids a pow call and is
    // exactly reproducible.
    beta1_t: f64,
    beta2_t: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            m,
            v,
            step: 0,
            beta1_t: 1.0,
            beta2_t: 1.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter, reading the accumulated grads.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, hp: &AdamHyper) -> Result<()> {
    if !(hp.lr > 0.0) {
        return Err(Error::Argument(alloc::format!(
            "learning rate must be positive, got {}",
            hp.lr
        )));
    }
    if !(0.0..1.0).contains(&hp.beta1) || !(0.0..1.0).contains(&hp.beta2) {
        return Err(Error::Argument("betas must lie in [0, 1)".into()));
    }
    if state.m.len() != params.len() {
        return Err(Error::State(alloc::format!(
            "optimizer state has {} parameters, set has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    state.beta1_t *= hp.beta1;
    state.beta2_t *= hp.beta2;
    let bc1 = 1.0 - state.beta1_t;
    let bc2 = 1.0 - state.beta2_t;
    for i in 0..params.len() {
        let p = params.get_mut(crate::tensor::ParamId(i));
        let n = p.tensor.numel();
        if state.m[i].len() != n {
            return Err(Error::State(alloc::format!(
                "optimizer state size mismatch on {}",
                p.name
            )));
        }
        let grad = p.tensor.grad().expect("parameters always track grads");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut delta = vec![0.0; n];
        for j in 0..n {
            let g = grad[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            delta[j] = hp.lr * m_hat / (crate::math::sqrt(v_hat) + hp.eps);
        }
        let values = p.tensor.values_mut();
        for j in 0..n {
            values[j] -= delta[j];
        }
    }
    Ok(())
}
