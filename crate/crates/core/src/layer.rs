//! Trainable layers with cached reverse-mode gradients, and a sequential container.
//!
//! `infer` takes `&self` and never caches, so a built model can serve
//! concurrent inference. `forward` in [`Mode::Train`] stores what `backward`
//! needs; `backward` consumes that cache and accumulates parameter gradients
//! into each parameter tensor's `grad` buffer.

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm, batchnorm_backward, batchnorm_infer, conv2d_backward, maxpool2d_backward, maxpool2d_with_indices,
    relu, relu_backward, upsample_nearest2x, upsample_nearest2x_backward, BatchNormCache, BatchNormParams,
    ConvWeights, Mode,
};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone)]
pub struct Conv<T: Scalar = f32> {
    pub weights: ConvWeights<T>,
    cache: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar = f32> {
    pub params: BatchNormParams<T>,
    cache: Option<BatchNormCache<T>>,
}

#[derive(Debug, Clone)]
pub enum Layer<T: Scalar = f32> {
    Conv(Conv<T>),
    BatchNorm(BatchNorm<T>),
    Relu { cache: Option<Tensor<T>> },
    MaxPool { cache: Option<(Shape, Vec<u32>)> },
    Upsample { primed: bool },
}

impl<T: Scalar> Layer<T> {
    pub fn conv(weights: ConvWeights<T>) -> Self {
        Layer::Conv(Conv { weights, cache: None })
    }

    pub fn batchnorm(params: BatchNormParams<T>) -> Self {
        Layer::BatchNorm(BatchNorm { params, cache: None })
    }

    pub fn relu() -> Self {
        Layer::Relu { cache: None }
    }

    pub fn maxpool() -> Self {
        Layer::MaxPool { cache: None }
    }

    pub fn upsample() -> Self {
        Layer::Upsample { primed: false }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(c) => c.weights.kind.name(),
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu { .. } => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Upsample { .. } => "upsample",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvWeights<T>> {
        match self {
            Layer::Conv(c) => Some(&c.weights),
            _ => None,
        }
    }

    pub fn as_conv_mut(&mut self) -> Option<&mut ConvWeights<T>> {
        match self {
            Layer::Conv(c) => Some(&mut c.weights),
            _ => None,
        }
    }

    pub fn as_batchnorm(&self) -> Option<&BatchNormParams<T>> {
        match self {
            Layer::BatchNorm(b) => Some(&b.params),
            _ => None,
        }
    }

    pub fn as_batchnorm_mut(&mut self) -> Option<&mut BatchNormParams<T>> {
        match self {
            Layer::BatchNorm(b) => Some(&mut b.params),
            _ => None,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(c) => c.weights.output_shape(input),
            Layer::BatchNorm(b) => {
                crate::error::check_dim("batchnorm", "input channels", input.c, b.params.channels())?;
                Ok(input)
            }
            Layer::Relu { .. } => Ok(input),
            Layer::MaxPool { .. } => {
                if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) {
                    return Err(Error::invalid(format!("maxpool2d needs even spatial dims, got {input}")));
                }
                Ok(input.with_hw(input.h / 2, input.w / 2))
            }
            Layer::Upsample { .. } => Ok(input.with_hw(input.h * 2, input.w * 2)),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => c.weights.apply(x),
            Layer::BatchNorm(b) => batchnorm_infer(x, &b.params),
            Layer::Relu { .. } => Ok(relu(x)),
            Layer::MaxPool { .. } => maxpool2d_with_indices(x).map(|(y, _)| y),
            Layer::Upsample { .. } => Ok(upsample_nearest2x(x)),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            self.clear_cache();
            return self.infer(x);
        }
        match self {
            Layer::Conv(c) => {
                let y = c.weights.apply(x)?;
                c.cache = Some(x.clone());
                Ok(y)
            }
            Layer::BatchNorm(b) => {
                let (y, cache) = batchnorm(x, &mut b.params, Mode::Train)?;
                b.cache = cache;
                Ok(y)
            }
            Layer::Relu { cache } => {
                let y = relu(x);
                *cache = Some(y.clone());
                Ok(y)
            }
            Layer::MaxPool { cache } => {
                let (y, idx) = maxpool2d_with_indices(x)?;
                *cache = Some((x.shape(), idx));
                Ok(y)
            }
            Layer::Upsample { primed } => {
                *primed = true;
                Ok(upsample_nearest2x(x))
            }
        }
    }

    /// Gradient with respect to the input of the last training forward.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let name = self.name();
        match self {
            Layer::Conv(c) => {
                let x = c.cache.take().ok_or(Error::NoForwardCache(name))?;
                let g = conv2d_backward(&x, &c.weights, grad)?;
                for (acc, d) in c.weights.kernel.grad_mut().iter_mut().zip(&g.kernel) {
                    *acc += *d;
                }
                if let (Some(b), Some(gb)) = (c.weights.bias.as_mut(), g.bias.as_ref()) {
                    for (acc, d) in b.grad_mut().iter_mut().zip(gb) {
                        *acc += *d;
                    }
                }
                Ok(g.input)
            }
            Layer::BatchNorm(b) => {
                let cache = b.cache.take().ok_or(Error::NoForwardCache(name))?;
                batchnorm_backward(&cache, &mut b.params, grad)
            }
            Layer::Relu { cache } => {
                let y = cache.take().ok_or(Error::NoForwardCache(name))?;
                relu_backward(&y, grad)
            }
            Layer::MaxPool { cache } => {
                let (shape, idx) = cache.take().ok_or(Error::NoForwardCache(name))?;
                maxpool2d_backward(shape, &idx, grad)
            }
            Layer::Upsample { primed } => {
                if !std::mem::take(primed) {
                    return Err(Error::NoForwardCache(name));
                }
                upsample_nearest2x_backward(grad)
            }
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(c) => c.cache = None,
            Layer::BatchNorm(b) => b.cache = None,
            Layer::Relu { cache } => *cache = None,
            Layer::MaxPool { cache } => *cache = None,
            Layer::Upsample { primed } => *primed = false,
        }
    }

    /// Trainable tensors in a fixed order: kernel, bias, gamma, beta.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.weights.kernel);
                if let Some(b) = c.weights.bias.as_mut() {
                    f(b);
                }
            }
            Layer::BatchNorm(b) => {
                f(&mut b.params.gamma);
                f(&mut b.params.beta);
            }
            _ => {}
        }
    }

    /// Stored parameter count, including batchnorm running statistics.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weights.param_count(),
            Layer::BatchNorm(b) => b.params.param_count(),
            _ => 0,
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T: Scalar = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.layers.iter().try_fold(input, |s, l| l.output_shape(s))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut layers = self.layers.iter();
        let Some(first) = layers.next() else {
            return Ok(x.clone());
        };
        let mut y = first.infer(x)?;
        for l in layers {
            y = l.infer(&y)?;
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut layers = self.layers.iter_mut();
        let Some(first) = layers.next() else {
            return Ok(x.clone());
        };
        let mut y = first.forward(x, mode)?;
        for l in layers {
            y = l.forward(&y, mode)?;
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_before_forward_is_rejected() {
        let mut l = Layer::<f32>::conv(ConvWeights::pointwise(2, 2).unwrap());
        let err = l.backward(&Tensor::zeros((1, 2, 2, 2))).unwrap_err();
        assert!(matches!(err, Error::NoForwardCache("pointwise")));
        let mut up = Layer::<f32>::upsample();
        assert!(up.backward(&Tensor::zeros((1, 1, 2, 2))).is_err());
    }

    #[test]
    fn infer_mode_forward_leaves_no_cache() {
        let mut seq = Sequential::new(vec![Layer::<f32>::conv(ConvWeights::pointwise(1, 1).unwrap()), Layer::relu()]);
        let x = Tensor::full((1, 1, 2, 2), 1.0);
        seq.forward(&x, Mode::Train).unwrap();
        seq.forward(&x, Mode::Infer).unwrap();
        assert!(seq.backward(&Tensor::zeros((1, 1, 2, 2))).is_err());
    }

    #[test]
    fn disconnected_parameter_gets_exact_zero_grad() {
        // Loss reads output channel 0 only; filter 1 never influences it.
        let w = ConvWeights::<f64>::standard(2, 1, 3, 1, 1)
            .unwrap()
            .with_kernel((0..18).map(|v| v as f64 * 0.1 - 0.7).collect())
            .unwrap();
        let mut l = Layer::conv(w);
        let x = Tensor::from_fn((1, 1, 4, 4), |_, _, y, xx| (y * 4 + xx) as f64 * 0.25);
        let y = l.forward(&x, Mode::Train).unwrap();
        let g = Tensor::from_fn(y.shape(), |_, c, _, _| if c == 0 { 1.0 } else { 0.0 });
        l.backward(&g).unwrap();
        let conv = l.as_conv().unwrap();
        let kg = conv.kernel.grad().unwrap();
        assert!(kg[9..].iter().all(|&v| v == 0.0));
        assert!(kg[..9].iter().any(|&v| v != 0.0));
        assert_eq!(conv.bias.as_ref().unwrap().grad().unwrap()[1], 0.0);
    }
}
