use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with the usual `(0.9, 0.999, 1e-8)` defaults.
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor]) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }
}

/// One bias-corrected Adam update using each parameter's stored gradient.
pub fn adam_step(state: &mut AdamState, params: &mut [Tensor]) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::shape("adam_step", &[state.first.len()], &[params.len()]));
    }
    for (i, p) in params.iter().enumerate() {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGrad(alloc::format!("#{i}")))?;
        if g.len() != p.len() || state.first[i].len() != p.len() {
            return Err(Error::shape("adam_step", &[state.first[i].len()], &[g.len()]));
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - libm::pow(state.beta1, t);
    let bc2 = 1.0 - libm::pow(state.beta2, t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let g = p.grad.take().expect("checked above");
        let data = p.data_mut();
        for j in 0..data.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        p.grad = Some(g);
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> f64 {
    clip_grad_norm_groups(&mut [params], max_norm)
}

/// [`clip_grad_norm`] over parameters held by several networks, using one
/// joint norm.
pub fn clip_grad_norm_groups(groups: &mut [&mut [Tensor]], max_norm: f64) -> f64 {
    let total: f64 = groups
        .iter()
        .flat_map(|g| g.iter())
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = libm::sqrt(total);
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in groups.iter_mut().flat_map(|g| g.iter_mut()).filter_map(|p| p.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
