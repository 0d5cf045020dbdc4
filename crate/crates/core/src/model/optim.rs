//! Plain SGD and Adam over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::ParamSet;
use crate::model::tensor::Tensor;

fn check_grads(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match parameter {} {:?}",
                g.shape(),
                params.name(i),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of {}", params.name(i)),
            });
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
        for (w, d) in p.data.iter_mut().zip(&g.data) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect()
        };
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    check_grads(params, grads)?;
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m.data[j] / bc1;
            let vhat = v.data[j] / bc2;
            p.data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
