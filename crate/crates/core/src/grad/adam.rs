//! Adam parameter updates with bias correction.

use serde::{Deserialize, Serialize};

use crate::grad::tensor::Tensor;
use crate::{Error, Result};

/// Adam hyperparameters. The learning rate comes from the caller's config;
/// the moment decays and epsilon default to the reference values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper::with_lr(0.01)
    }
}

/// Moment estimates for one parameter tensor. `step` counts completed
/// updates and increments by exactly 1 per call.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(param_shape: Vec<usize>, hyper: AdamHyper) -> Self {
        AdamState {
            step: 0,
            m: Tensor::zeros(param_shape.clone()),
            v: Tensor::zeros(param_shape),
            hyper,
        }
    }
}

/// One Adam update. Pure: returns the new parameter and state.
pub fn adam_step(param: &Tensor, grad: &Tensor, state: &AdamState) -> Result<(Tensor, AdamState)> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::shape(format!(
            "adam_step shape mismatch: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    let t = state.step + 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);

    let n = param.numel();
    let mut new_m = vec![0.0f32; n];
    let mut new_v = vec![0.0f32; n];
    let mut new_p = vec![0.0f32; n];
    for i in 0..n {
        let g = grad.data()[i] as f64;
        let m = h.beta1 * state.m.data()[i] as f64 + (1.0 - h.beta1) * g;
        let v = h.beta2 * state.v.data()[i] as f64 + (1.0 - h.beta2) * g * g;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        new_m[i] = m as f32;
        new_v[i] = v as f32;
        new_p[i] = (param.data()[i] as f64 - h.lr * m_hat / (v_hat.sqrt() + h.epsilon)) as f32;
    }
    let shape = param.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), new_p)?,
        AdamState {
            step: t,
            m: Tensor::new(shape.clone(), new_m)?,
            v: Tensor::new(shape, new_v)?,
            hyper: h,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(vec![3]);
        let st = AdamState::new(vec![3], AdamHyper::with_lr(0.1));
        let (p2, st2) = adam_step(&p, &g, &st).unwrap();
        assert_eq!(p2, p);
        assert_eq!(st2.step, 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // m_hat = v_hat = g on the first step, so the move is lr / (1 + eps).
        let p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let st = AdamState::new(vec![1], AdamHyper::with_lr(0.1));
        let (p2, _) = adam_step(&p, &g, &st).unwrap();
        assert!((p2.data()[0] - 0.9).abs() < 1e-6, "got {}", p2.data()[0]);
    }

    #[test]
    fn update_is_deterministic() {
        let p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let g = Tensor::new(vec![2], vec![0.01, -0.02]).unwrap();
        let st = AdamState::new(vec![2], AdamHyper::default());
        let a = adam_step(&p, &g, &st).unwrap();
        let b = adam_step(&p, &g, &st).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.m, b.1.m);
        assert_eq!(a.1.v, b.1.v);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        let st = AdamState::new(vec![2], AdamHyper::default());
        assert!(adam_step(&p, &g, &st).is_err());
    }
}
