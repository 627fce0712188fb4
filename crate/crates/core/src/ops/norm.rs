//! Per-channel batch normalization.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each train-mode update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Infer,
}

/// `gamma` and `beta` are trainable and stored as `(1, C, 1, 1)` tensors so
/// they carry gradients; running statistics are plain buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Identity-initialised: gamma 1, beta 0, mean 0, var 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full((1, channels, 1, 1), T::one()),
            beta: Tensor::zeros((1, channels, 1, 1)),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::of(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// gamma, beta, running mean and running variance.
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_dim("batchnorm", "beta length", self.beta.len(), c)?;
        check_dim("batchnorm", "running_mean length", self.running_mean.len(), c)?;
        check_dim("batchnorm", "running_var length", self.running_var.len(), c)?;
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("batchnorm running_var must be non-negative"));
        }
        if self.eps < T::zero() {
            return Err(Error::invalid("batchnorm eps must be non-negative"));
        }
        Ok(())
    }
}

/// Saved by a train-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

/// Inference-mode normalization with the running statistics.
pub fn batchnorm_infer<T: Scalar>(input: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let s = input.shape();
    check_dim("batchnorm", "input channels", s.c, p.channels())?;
    let mut out = Tensor::zeros(s);
    for c in 0..s.c {
        let scale = p.gamma.data()[c] / (p.running_var[c] + p.eps).sqrt();
        let mean = p.running_mean[c];
        let beta = p.beta.data()[c];
        for n in 0..s.n {
            let start = out.index(n, c, 0, 0);
            for (o, &x) in out.data_mut()[start..start + s.plane()].iter_mut().zip(input.plane(n, c)) {
                *o = (x - mean) * scale + beta;
            }
        }
    }
    Ok(out)
}

/// Normalizes per channel. Train mode uses the batch mean and (biased)
/// variance and folds them into the running statistics.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    p.validate()?;
    let s = input.shape();
    check_dim("batchnorm", "input channels", s.c, p.channels())?;
    match mode {
        Mode::Infer => Ok((batchnorm_infer(input, p)?, None)),
        Mode::Train => {
            let mut out = Tensor::zeros(s);
            let m = (s.n * s.plane()) as f64;
            let mut normalized = Tensor::zeros(s);
            let mut inv_std = Vec::with_capacity(s.c);
            let momentum = T::of(BN_MOMENTUM);
            for c in 0..s.c {
                let mut sum = 0.0;
                for n in 0..s.n {
                    sum += input.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / m;
                let mut sq = 0.0;
                for n in 0..s.n {
                    sq += input.plane(n, c).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m;
                let istd = T::of(1.0 / (var + p.eps.as_f64()).sqrt());
                let (mean_t, gamma, beta) = (T::of(mean), p.gamma.data()[c], p.beta.data()[c]);
                for n in 0..s.n {
                    let start = out.index(n, c, 0, 0);
                    for (i, &x) in input.plane(n, c).iter().enumerate() {
                        let xh = (x - mean_t) * istd;
                        normalized.data_mut()[start + i] = xh;
                        out.data_mut()[start + i] = xh * gamma + beta;
                    }
                }
                inv_std.push(istd);
                p.running_mean[c] = momentum * p.running_mean[c] + (T::one() - momentum) * mean_t;
                p.running_var[c] = momentum * p.running_var[c] + (T::one() - momentum) * T::of(var);
            }
            Ok((out, Some(BatchNormCache { normalized, inv_std })))
        }
    }
}

/// Returns the input gradient and accumulates gamma/beta gradients into `p`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    p: &mut BatchNormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = grad_out.shape();
    if s != cache.normalized.shape() {
        return Err(Error::invalid(format!(
            "batchnorm gradient {s} does not match cached {}",
            cache.normalized.shape()
        )));
    }
    let m = (s.n * s.plane()) as f64;
    let mut gx = Tensor::zeros(s);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let gamma = p.gamma.data()[c].as_f64();
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for n in 0..s.n {
            for (&dy, &xh) in grad_out.plane(n, c).iter().zip(cache.normalized.plane(n, c)) {
                sum_dy += dy.as_f64();
                sum_dy_xh += dy.as_f64() * xh.as_f64();
            }
        }
        dgamma[c] = T::of(sum_dy_xh);
        dbeta[c] = T::of(sum_dy);
        let istd = cache.inv_std[c].as_f64();
        let k = gamma * istd / m;
        for n in 0..s.n {
            let start = gx.index(n, c, 0, 0);
            for (i, (&dy, &xh)) in grad_out.plane(n, c).iter().zip(cache.normalized.plane(n, c)).enumerate() {
                let v = k * (m * dy.as_f64() - sum_dy - xh.as_f64() * sum_dy_xh);
                gx.data_mut()[start + i] = T::of(v);
            }
        }
    }
    for (g, d) in p.gamma.grad_mut().iter_mut().zip(dgamma) {
        *g += d;
    }
    for (g, d) in p.beta.grad_mut().iter_mut().zip(dbeta) {
        *g += d;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f64> {
        Tensor::from_fn((2, 3, 2, 3), |n, c, y, x| ((n * 7 + c * 5 + y * 3 + x) % 11) as f64 * 0.3 - 1.0)
    }

    #[test]
    fn identity_normalization() {
        let mut p = BatchNormParams::<f64>::new(3);
        p.eps = 0.0;
        let x = sample();
        let (y, _) = batchnorm(&x, &mut p, Mode::Infer).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_gamma_collapses_to_beta() {
        let mut p = BatchNormParams::<f64>::new(3);
        p.gamma.data_mut().iter_mut().for_each(|g| *g = 0.0);
        p.beta.data_mut().copy_from_slice(&[0.5, -2.0, 3.0]);
        for mode in [Mode::Infer, Mode::Train] {
            let (y, _) = batchnorm(&sample(), &mut p, mode).unwrap();
            for c in 0..3 {
                assert!(y.plane(0, c).iter().all(|&v| v == p.beta.data()[c]));
            }
        }
    }

    #[test]
    fn train_mode_normalizes_and_updates_running_stats() {
        let mut p = BatchNormParams::<f64>::new(3);
        let x = sample();
        let (y, cache) = batchnorm(&x, &mut p, Mode::Train).unwrap();
        assert!(cache.is_some());
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
        assert!(p.running_mean.iter().any(|&m| m != 0.0));
        assert!(p.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut p = BatchNormParams::<f64>::new(2);
        assert!(batchnorm(&sample(), &mut p, Mode::Infer).is_err());
        let mut p = BatchNormParams::<f64>::new(3);
        p.running_var.pop();
        assert!(batchnorm(&sample(), &mut p, Mode::Infer).is_err());
    }
}
