//! Parameter updates: Adam with bias correction, and a plain
//! gradient-descent step kept as a test hook for update-rule checks.

use super::Tensor;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment buffers for one parameter list.
///
/// Buffers are allocated to match the parameters handed to [`AdamState::new`]
/// and stay aligned with them by position.
pub struct AdamState {
    step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            step_count: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Moment buffers for one parameter, for inspection in tests.
    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.first_moment[index], &self.second_moment[index])
    }
}

/// One Adam update over `params`; gradients are consumed and zeroed.
pub fn adam_step(params: &[Tensor], state: &mut AdamState, learning_rate: f64) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::State(format!(
            "adam state tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.first_moment[i].len() != p.numel() {
            return Err(Error::State(format!(
                "adam moment buffer {i} has {} elements, parameter has {}",
                state.first_moment[i].len(),
                p.numel()
            )));
        }
        if p.grad().is_none() {
            return Err(Error::State(format!("parameter {i} has no gradient")));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        p.with_data_mut(|data, grad| {
            let g = grad.as_ref().expect("checked above");
            for j in 0..data.len() {
                m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
                v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
            }
            *grad = None;
        });
    }
    Ok(())
}

/// Plain `p -= lr * grad` (test hook); gradients are consumed and zeroed.
pub fn sgd_step(params: &[Tensor], learning_rate: f64) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::State(format!("parameter {i} has no gradient")));
        }
    }
    for p in params {
        p.with_data_mut(|data, grad| {
            let g = grad.as_ref().expect("checked above");
            for j in 0..data.len() {
                data[j] -= learning_rate * g[j];
            }
            *grad = None;
        });
    }
    Ok(())
}
