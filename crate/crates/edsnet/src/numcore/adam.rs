//! Bias-corrected Adam. The L2 term is folded into the gradient before the
//! moment updates, matching the classic regularized form.

use super::Tensor;
use crate::error::{EdsError, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One update. `step` is 1-based and shared across all tensors of a model.
pub fn adam_step(
    param: &mut Tensor,
    grad: &[f32],
    state: &mut AdamState,
    hyper: &AdamHyper,
    step: u32,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() {
        return Err(EdsError::shape(format!(
            "adam buffers: param {}, grad {}, state {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if step == 0 {
        return Err(EdsError::invalid("adam step counter is 1-based"));
    }
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for i in 0..param.len() {
        let p = &mut param.data_mut()[i];
        let g = grad[i] + hyper.weight_decay * *p;
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    param.check_finite("adam update")
}
