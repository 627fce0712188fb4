//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Anything that owns trainable tensors and can enumerate them in a fixed order.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |t| t.zero_grad());
    }

    fn trainable_len(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |t| n += t.len());
        n
    }
}

impl<T: Scalar> Parameterized<T> for crate::layer::Layer<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        crate::layer::Layer::visit_params(self, f)
    }
}

impl<T: Scalar> Parameterized<T> for crate::layer::Sequential<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        crate::layer::Sequential::visit_params(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            config,
        }
    }

    /// One update over every trainable tensor of `model`, reading each
    /// tensor's gradient (missing gradients count as zero). Rejected without
    /// touching parameters or state if any gradient is non-finite.
    pub fn step_model<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut total = 0;
        let mut finite = true;
        model.visit_params(&mut |p| {
            total += p.len();
            finite &= p.grad().is_none_or(|g| g.iter().all(|v| v.is_finite()));
        });
        check_dim("adam", "parameter count", total, self.m.len())?;
        if !finite {
            return Err(Error::NonFinite("gradients"));
        }
        self.t += 1;
        let coeffs = Coeffs::new(&self.config, self.t);
        let mut offset = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        model.visit_params(&mut |p| {
            let len = p.len();
            let (value, grad) = p.value_and_grad_mut();
            update(value, grad, &mut m[offset..offset + len], &mut v[offset..offset + len], &coeffs);
            offset += len;
        });
        Ok(())
    }
}

struct Coeffs<T> {
    alpha: T,
    beta1: T,
    beta2: T,
    eps: T,
    m_corr: T,
    v_corr: T,
}

impl<T: Scalar> Coeffs<T> {
    fn new(c: &AdamConfig, t: u64) -> Self {
        let t = t as i32;
        Self {
            alpha: T::of(c.alpha),
            beta1: T::of(c.beta1),
            beta2: T::of(c.beta2),
            eps: T::of(c.eps),
            m_corr: T::of(1.0 - c.beta1.powi(t)),
            v_corr: T::of(1.0 - c.beta2.powi(t)),
        }
    }
}

fn update<T: Scalar>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], c: &Coeffs<T>) {
    let one = T::one();
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = c.beta1 * m[i] + (one - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (one - c.beta2) * g * g;
        let m_hat = m[i] / c.m_corr;
        let v_hat = v[i] / c.v_corr;
        params[i] = params[i] - c.alpha * m_hat / (v_hat.sqrt() + c.eps);
    }
}

/// Flat-vector Adam step.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    check_dim("adam", "gradient length", grads.len(), params.len())?;
    check_dim("adam", "moment length", state.m.len(), params.len())?;
    check_dim("adam", "moment length", state.v.len(), params.len())?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    state.t += 1;
    let coeffs = Coeffs::new(&state.config, state.t);
    update(params, grads, &mut state.m, &mut state.v, &coeffs);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_alpha_against_gradient_sign() {
        // m̂ = g and v̂ = g² after one step, so the update is alpha·g/(|g|+eps).
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2, AdamConfig::default());
        adam_step(&mut p, &[0.5, -0.5], &mut s).unwrap();
        let expected = 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - (1.0 - expected)).abs() < 1e-15);
        assert!((p[1] - (-2.0 + expected)).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts_step() {
        let mut p = vec![0.3f32; 4];
        let mut s = AdamState::new(4, AdamConfig::default());
        adam_step(&mut p, &[0.0; 4], &mut s).unwrap();
        assert_eq!(p, vec![0.3f32; 4]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn two_steps_hand_iterated() {
        let cfg = AdamConfig::default();
        let g = 0.25f64;
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1, cfg);
        adam_step(&mut p, &[g], &mut s).unwrap();
        let after_one = p[0];
        adam_step(&mut p, &[g], &mut s).unwrap();

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(after_one < 0.0 && p[0] < after_one);
        assert!((p[0] - x).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = vec![1.0f32, 2.0];
        let mut s = AdamState::new(2, AdamConfig::default());
        let before = (p.clone(), s.clone());
        assert!(adam_step(&mut p, &[1.0, f32::NAN], &mut s).is_err());
        assert_eq!((p, s), before);
        let mut s2 = AdamState::<f32>::new(3, AdamConfig::default());
        assert!(adam_step(&mut [0.0f32; 2], &[0.0; 2], &mut s2).is_err());
    }
}
