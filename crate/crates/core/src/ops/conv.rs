//! Standard, depthwise, pointwise and transposed 2-D convolution.
//!
//! All four variants share three plane primitives: `gather` (strided
//! correlation into a small plane), `scatter` (its adjoint, into a big plane)
//! and `dot` (the weight gradient of either). For a convolution the output is
//! the small plane; for a transposed convolution the input is.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::for_each_plane;
use crate::error::{check_dim, Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
    Transposed,
}

impl ConvKind {
    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Standard => "conv",
            ConvKind::Depthwise => "depthwise",
            ConvKind::Pointwise => "pointwise",
            ConvKind::Transposed => "transposed",
        }
    }
}

/// Filters of one convolution layer.
///
/// `kernel` has shape `(C_out, C_in, K, K)` for standard, pointwise and
/// transposed kinds and `(C, 1, K, K)` for depthwise. `bias`, when present,
/// has shape `(1, C_out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub kind: ConvKind,
    pub stride: usize,
    pub padding: usize,
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvWeights<T> {
    /// Zero-initialised weights of the given geometry.
    pub fn new(
        kind: ConvKind,
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let per_filter = match kind {
            ConvKind::Depthwise => {
                if in_channels != out_channels {
                    return Err(Error::invalid(format!(
                        "depthwise convolution needs one filter per channel: {out_channels} filters for {in_channels} channels"
                    )));
                }
                1
            }
            _ => in_channels,
        };
        let weights = Self {
            kind,
            stride,
            padding,
            kernel: Tensor::zeros((out_channels, per_filter, kernel_size, kernel_size)),
            bias: bias.then(|| Tensor::zeros((1, out_channels, 1, 1))),
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn standard(out_channels: usize, in_channels: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(ConvKind::Standard, out_channels, in_channels, k, stride, padding, true)
    }

    pub fn depthwise(channels: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(ConvKind::Depthwise, channels, channels, k, stride, padding, true)
    }

    pub fn pointwise(out_channels: usize, in_channels: usize) -> Result<Self> {
        Self::new(ConvKind::Pointwise, out_channels, in_channels, 1, 1, 0, true)
    }

    pub fn transposed(out_channels: usize, in_channels: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(ConvKind::Transposed, out_channels, in_channels, k, stride, padding, true)
    }

    /// Replaces the kernel coefficients, keeping geometry.
    pub fn with_kernel(mut self, values: Vec<T>) -> Result<Self> {
        self.kernel = Tensor::from_vec(self.kernel.shape(), values)?;
        Ok(self)
    }

    pub fn with_bias(mut self, values: Vec<T>) -> Result<Self> {
        self.bias = Some(Tensor::from_vec((1, self.out_channels(), 1, 1), values)?);
        Ok(self)
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            ConvKind::Depthwise => self.kernel.shape().n,
            _ => self.kernel.shape().c,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape().h
    }

    /// Kernel coefficients of output filter `o`.
    pub fn filter(&self, o: usize) -> &[T] {
        let per = self.kernel.shape().c * self.kernel.shape().plane();
        &self.kernel.data()[o * per..(o + 1) * per]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn fan_in(&self) -> usize {
        let k2 = self.kernel_size() * self.kernel_size();
        match self.kind {
            ConvKind::Depthwise => k2,
            _ => self.in_channels() * k2,
        }
    }

    /// Uniform init in ±√(6 / fan_in); biases are zeroed.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = (6.0 / self.fan_in() as f64).sqrt();
        for v in self.kernel.data_mut() {
            *v = T::of(rng.gen_range(-bound..bound));
        }
        if let Some(b) = self.bias.as_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ks = self.kernel.shape();
        if ks.h != ks.w || ks.h == 0 {
            return Err(Error::invalid(format!("kernel must be square and non-empty, got {ks}")));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        match self.kind {
            ConvKind::Depthwise if ks.c != 1 => {
                return Err(Error::invalid(format!(
                    "depthwise kernel must be (C,1,K,K), got {ks}"
                )))
            }
            ConvKind::Pointwise if ks.h != 1 || self.stride != 1 || self.padding != 0 => {
                return Err(Error::invalid("pointwise convolution requires K=1, stride 1, padding 0"))
            }
            _ => {}
        }
        if let Some(b) = &self.bias {
            check_dim("conv bias", "bias length", b.len(), ks.n)?;
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if !self.kernel.is_finite() || !self.bias.as_ref().is_none_or(Tensor::is_finite) {
            return Err(Error::NonFinite("convolution weights"));
        }
        Ok(())
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size();
        let (s, p) = (self.stride, self.padding);
        match self.kind {
            ConvKind::Transposed => {
                let size = |n: usize, dim: &'static str| -> Result<usize> {
                    let natural = (n - 1) * s + k;
                    let target = s * n;
                    if natural < 2 * p || target < natural - 2 * p || target - (natural - 2 * p) >= s {
                        return Err(Error::invalid(format!(
                            "transposed convolution with K={k}, stride {s}, padding {p} cannot map {dim} {n} to exactly {target}"
                        )));
                    }
                    Ok(target)
                };
                Ok((size(h, "height")?, size(w, "width")?))
            }
            _ => {
                let size = |n: usize, dim: &'static str| -> Result<usize> {
                    if n + 2 * p < k {
                        return Err(Error::Shape {
                            op: "conv2d",
                            dim,
                            got: n + 2 * p,
                            expected: k,
                        });
                    }
                    Ok((n + 2 * p - k) / s + 1)
                };
                Ok((size(h, "padded height")?, size(w, "padded width")?))
            }
        }
    }

    /// Output shape for a given input shape, checking channel agreement.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        check_dim(self.kind.name(), "input channels", input.c, self.in_channels())?;
        let (h, w) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels(), h, w))
    }

    /// Runs the convolution matching `self.kind`.
    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        self.check_finite()?;
        let out = self.output_shape(input.shape())?;
        Ok(match self.kind {
            ConvKind::Transposed => transposed_forward(input, self, out),
            _ => correlate_forward(input, self, out),
        })
    }

    #[inline]
    fn tap(&self, o: usize, ci: usize, ky: usize, kx: usize) -> T {
        let ks = self.kernel.shape();
        self.kernel.data()[((o * ks.c + ci) * ks.h + ky) * ks.w + kx]
    }
}

fn expect_kind<T: Scalar>(w: &ConvWeights<T>, kind: ConvKind) -> Result<()> {
    if w.kind != kind {
        return Err(Error::invalid(format!(
            "{} weights passed to {} convolution",
            w.kind.name(),
            kind.name()
        )));
    }
    Ok(())
}

/// Standard convolution with zero padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    expect_kind(w, ConvKind::Standard)?;
    w.apply(input)
}

/// One `K×K` filter per channel; channel `c` of the output reads only channel `c`.
pub fn depthwise_conv2d<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    expect_kind(w, ConvKind::Depthwise)?;
    w.apply(input)
}

/// 1×1 convolution: a per-pixel linear map across channels.
pub fn pointwise_conv2d<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    expect_kind(w, ConvKind::Pointwise)?;
    w.apply(input)
}

/// Adjoint of a strided convolution. The output is always exactly `stride×`
/// the input in each spatial dimension; geometries that cannot achieve this are
/// rejected.
pub fn transposed_conv2d<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    expect_kind(w, ConvKind::Transposed)?;
    w.apply(input)
}

/// Gradients of any convolution kind given the forward input and the
/// gradient of the output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let expected = w.output_shape(input.shape())?;
    if grad_out.shape() != expected {
        return Err(Error::invalid(format!(
            "output gradient {} does not match output shape {expected}",
            grad_out.shape()
        )));
    }
    let (gx, gk) = match w.kind {
        ConvKind::Transposed => transposed_backward(input, w, grad_out),
        _ => correlate_backward(input, w, grad_out),
    };
    let gb = w.bias.as_ref().map(|_| bias_grad(grad_out));
    Ok(ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    })
}

/// `[lo, hi)` of small-plane coordinates `o` whose tap `o*s + k - p` lands inside a
/// big plane of extent `big`.
#[inline]
fn tap_range(small: usize, big: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let top = big + p;
    let hi = if top > k { ((top - 1 - k) / s + 1).min(small) } else { 0 };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
struct Geom {
    sh: usize,
    sw: usize,
    bh: usize,
    bw: usize,
    s: usize,
    p: usize,
}

/// `small[o] += w * big[o*s + k - p]`
#[inline]
fn gather<T: Scalar>(small: &mut [T], big: &[T], g: Geom, w: T, ky: usize, kx: usize) {
    let (y0, y1) = tap_range(g.sh, g.bh, g.s, g.p, ky);
    let (x0, x1) = tap_range(g.sw, g.bw, g.s, g.p, kx);
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = oy * g.s + ky - g.p;
        let row = &mut small[oy * g.sw + x0..oy * g.sw + x1];
        let base = iy * g.bw + x0 * g.s + kx - g.p;
        if g.s == 1 {
            let len = row.len();
            for (d, &v) in row.iter_mut().zip(&big[base..base + len]) {
                *d += w * v;
            }
        } else {
            for (j, d) in row.iter_mut().enumerate() {
                *d += w * big[base + j * g.s];
            }
        }
    }
}

/// `big[o*s + k - p] += w * small[o]`
#[inline]
fn scatter<T: Scalar>(big: &mut [T], small: &[T], g: Geom, w: T, ky: usize, kx: usize) {
    let (y0, y1) = tap_range(g.sh, g.bh, g.s, g.p, ky);
    let (x0, x1) = tap_range(g.sw, g.bw, g.s, g.p, kx);
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = oy * g.s + ky - g.p;
        let row = &small[oy * g.sw + x0..oy * g.sw + x1];
        let base = iy * g.bw + x0 * g.s + kx - g.p;
        if g.s == 1 {
            for (d, &v) in big[base..base + row.len()].iter_mut().zip(row) {
                *d += w * v;
            }
        } else {
            for (j, &v) in row.iter().enumerate() {
                big[base + j * g.s] += w * v;
            }
        }
    }
}

/// `Σ_o small[o] * big[o*s + k - p]`
#[inline]
fn dot<T: Scalar>(small: &[T], big: &[T], g: Geom, ky: usize, kx: usize) -> T {
    let (y0, y1) = tap_range(g.sh, g.bh, g.s, g.p, ky);
    let (x0, x1) = tap_range(g.sw, g.bw, g.s, g.p, kx);
    let mut acc = T::zero();
    if x0 >= x1 {
        return acc;
    }
    for oy in y0..y1 {
        let iy = oy * g.s + ky - g.p;
        let base = iy * g.bw + x0 * g.s + kx - g.p;
        for (j, &a) in small[oy * g.sw + x0..oy * g.sw + x1].iter().enumerate() {
            acc += a * big[base + j * g.s];
        }
    }
    acc
}

/// Input channels feeding output filter `o`, paired with the kernel's
/// input-channel slot.
fn feeds(depthwise: bool, o: usize, c_in: usize) -> impl Iterator<Item = (usize, usize)> {
    let (start, end) = if depthwise { (o, o + 1) } else { (0, c_in) };
    (start..end).map(move |c| (c, if depthwise { 0 } else { c }))
}

fn add_bias<T: Scalar>(plane: &mut [T], w: &ConvWeights<T>, o: usize) {
    if let Some(b) = &w.bias {
        let b = b.data()[o];
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn correlate_forward<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>, out_shape: Shape) -> Tensor<T> {
    let xs = x.shape();
    let depthwise = w.kind == ConvKind::Depthwise;
    let k = w.kernel_size();
    let g = Geom {
        sh: out_shape.h,
        sw: out_shape.w,
        bh: xs.h,
        bw: xs.w,
        s: w.stride,
        p: w.padding,
    };
    let oc = out_shape.c;
    let mut out = vec![T::zero(); out_shape.numel()];
    for_each_plane(&mut out, out_shape.plane(), |idx, plane| {
        let (b, o) = (idx / oc, idx % oc);
        for (c, ci) in feeds(depthwise, o, xs.c) {
            let src = x.plane(b, c);
            for ky in 0..k {
                for kx in 0..k {
                    gather(plane, src, g, w.tap(o, ci, ky, kx), ky, kx);
                }
            }
        }
        add_bias(plane, w, o);
    });
    Tensor::from_vec(out_shape, out).expect("output sized from shape")
}

fn correlate_backward<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>, gy: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let xs = x.shape();
    let ys = gy.shape();
    let depthwise = w.kind == ConvKind::Depthwise;
    let k = w.kernel_size();
    let g = Geom {
        sh: ys.h,
        sw: ys.w,
        bh: xs.h,
        bw: xs.w,
        s: w.stride,
        p: w.padding,
    };

    let mut gx = vec![T::zero(); xs.numel()];
    for_each_plane(&mut gx, xs.plane(), |idx, plane| {
        let (b, c) = (idx / xs.c, idx % xs.c);
        let producers = if depthwise { c..c + 1 } else { 0..ys.c };
        let ci = if depthwise { 0 } else { c };
        for o in producers {
            let src = gy.plane(b, o);
            for ky in 0..k {
                for kx in 0..k {
                    scatter(plane, src, g, w.tap(o, ci, ky, kx), ky, kx);
                }
            }
        }
    });

    let per_filter = w.kernel.shape().c * k * k;
    let mut gk = vec![T::zero(); w.kernel.len()];
    for_each_plane(&mut gk, per_filter, |o, filter| {
        for (c, ci) in feeds(depthwise, o, xs.c) {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    for b in 0..xs.n {
                        acc += dot(gy.plane(b, o), x.plane(b, c), g, ky, kx);
                    }
                    filter[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    (Tensor::from_vec(xs, gx).expect("sized"), gk)
}

fn transposed_forward<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>, out_shape: Shape) -> Tensor<T> {
    let xs = x.shape();
    let k = w.kernel_size();
    let g = Geom {
        sh: xs.h,
        sw: xs.w,
        bh: out_shape.h,
        bw: out_shape.w,
        s: w.stride,
        p: w.padding,
    };
    let oc = out_shape.c;
    let mut out = vec![T::zero(); out_shape.numel()];
    for_each_plane(&mut out, out_shape.plane(), |idx, plane| {
        let (b, o) = (idx / oc, idx % oc);
        for c in 0..xs.c {
            let src = x.plane(b, c);
            for ky in 0..k {
                for kx in 0..k {
                    scatter(plane, src, g, w.tap(o, c, ky, kx), ky, kx);
                }
            }
        }
        add_bias(plane, w, o);
    });
    Tensor::from_vec(out_shape, out).expect("output sized from shape")
}

fn transposed_backward<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>, gy: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let xs = x.shape();
    let ys = gy.shape();
    let k = w.kernel_size();
    let g = Geom {
        sh: xs.h,
        sw: xs.w,
        bh: ys.h,
        bw: ys.w,
        s: w.stride,
        p: w.padding,
    };

    let mut gx = vec![T::zero(); xs.numel()];
    for_each_plane(&mut gx, xs.plane(), |idx, plane| {
        let (b, c) = (idx / xs.c, idx % xs.c);
        for o in 0..ys.c {
            let src = gy.plane(b, o);
            for ky in 0..k {
                for kx in 0..k {
                    gather(plane, src, g, w.tap(o, c, ky, kx), ky, kx);
                }
            }
        }
    });

    let per_filter = xs.c * k * k;
    let mut gk = vec![T::zero(); w.kernel.len()];
    for_each_plane(&mut gk, per_filter, |o, filter| {
        for c in 0..xs.c {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    for b in 0..xs.n {
                        acc += dot(x.plane(b, c), gy.plane(b, o), g, ky, kx);
                    }
                    filter[(c * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    (Tensor::from_vec(xs, gx).expect("sized"), gk)
}

fn bias_grad<T: Scalar>(gy: &Tensor<T>) -> Vec<T> {
    let s = gy.shape();
    (0..s.c)
        .map(|o| {
            let mut acc = T::zero();
            for b in 0..s.n {
                for &v in gy.plane(b, o) {
                    acc += v;
                }
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), v: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn scalar_product() {
        let w = ConvWeights::standard(1, 1, 1, 1, 0).unwrap().with_kernel(vec![3.0]).unwrap();
        let y = conv2d(&t((1, 1, 1, 1), vec![2.0]), &w).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn all_ones_three_by_three_sums_entries() {
        let w = ConvWeights::standard(1, 1, 3, 1, 0).unwrap().with_kernel(vec![1.0; 9]).unwrap();
        let y = conv2d(&t((1, 1, 3, 3), (1..=9).map(|v| v as f32).collect()), &w).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let w = ConvWeights::<f32>::standard(2, 3, 3, 1, 1).unwrap();
        let err = conv2d(&Tensor::zeros((1, 4, 5, 5)), &w).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn too_small_input_is_rejected() {
        let w = ConvWeights::<f32>::standard(1, 1, 5, 1, 0).unwrap();
        assert!(conv2d(&Tensor::zeros((1, 1, 3, 8)), &w).is_err());
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let w = ConvWeights::standard(1, 1, 1, 1, 0).unwrap().with_kernel(vec![f32::NAN]).unwrap();
        assert!(matches!(conv2d(&Tensor::zeros((1, 1, 2, 2)), &w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let w = ConvWeights::<f32>::pointwise(2, 2).unwrap();
        assert!(conv2d(&Tensor::zeros((1, 2, 2, 2)), &w).is_err());
    }

    #[test]
    fn depthwise_identity_and_scaling() {
        let x = Tensor::<f32>::from_fn((1, 2, 3, 4), |_, c, y, xx| (c * 100 + y * 4 + xx) as f32 - 7.5);
        let ones = ConvWeights::depthwise(2, 1, 1, 0).unwrap().with_kernel(vec![1.0, 1.0]).unwrap();
        assert_eq!(depthwise_conv2d(&x, &ones).unwrap().data(), x.data());
        let scale = ConvWeights::depthwise(2, 1, 1, 0).unwrap().with_kernel(vec![2.0, 3.0]).unwrap();
        let y = depthwise_conv2d(&x, &scale).unwrap();
        for (i, (&a, &b)) in y.data().iter().zip(x.data()).enumerate() {
            let f = if i < 12 { 2.0 } else { 3.0 };
            assert_eq!(a, f * b);
        }
    }

    #[test]
    fn depthwise_filter_count_must_match_channels() {
        assert!(ConvWeights::<f32>::new(ConvKind::Depthwise, 3, 2, 3, 1, 1, true).is_err());
        let w = ConvWeights::<f32>::depthwise(3, 3, 1, 1).unwrap();
        assert!(depthwise_conv2d(&Tensor::zeros((1, 2, 4, 4)), &w).is_err());
    }

    #[test]
    fn pointwise_channel_sum_and_identity() {
        let x = Tensor::<f32>::from_fn((1, 2, 2, 2), |_, c, y, xx| (c * 4 + y * 2 + xx) as f32);
        let sum = ConvWeights::pointwise(1, 2).unwrap().with_kernel(vec![1.0, 1.0]).unwrap();
        assert_eq!(pointwise_conv2d(&x, &sum).unwrap().data(), &[4.0, 6.0, 8.0, 10.0]);

        let x3 = Tensor::<f32>::from_fn((1, 3, 2, 2), |_, c, y, xx| (c * 4 + y * 2 + xx) as f32 * 0.5);
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let id = ConvWeights::pointwise(3, 3).unwrap().with_kernel(eye).unwrap();
        assert_eq!(pointwise_conv2d(&x3, &id).unwrap().data(), x3.data());
    }

    #[test]
    fn transposed_single_pixel_spreads_kernel_window() {
        let w = ConvWeights::transposed(1, 1, 3, 2, 1).unwrap().with_kernel(vec![1.0; 9]).unwrap();
        let y = transposed_conv2d(&t((1, 1, 1, 1), vec![1.0]), &w).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0; 4]);

        // Distinct taps: output (oy,ox) receives kernel (oy+1, ox+1).
        let w = ConvWeights::transposed(1, 1, 3, 2, 1)
            .unwrap()
            .with_kernel((0..9).map(|v| v as f32).collect())
            .unwrap();
        let y = transposed_conv2d(&t((1, 1, 1, 1), vec![1.0]), &w).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn transposed_zero_input_gives_bias() {
        let w = ConvWeights::transposed(2, 3, 3, 2, 1)
            .unwrap()
            .with_kernel(vec![0.7; 54])
            .unwrap()
            .with_bias(vec![0.25, -1.0])
            .unwrap();
        let y = transposed_conv2d(&Tensor::zeros((1, 3, 2, 3)), &w).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 4, 6));
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.25));
        assert!(y.plane(0, 1).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn transposed_rejects_geometry_that_cannot_double() {
        // K=3, s=2, p=0 gives 2H+1.
        let w = ConvWeights::<f32>::transposed(1, 1, 3, 2, 0).unwrap();
        assert!(transposed_conv2d(&Tensor::zeros((1, 1, 4, 4)), &w).is_err());
        // K=2, s=2, p=0 doubles exactly.
        let w = ConvWeights::<f32>::transposed(1, 1, 2, 2, 0).unwrap();
        assert_eq!(w.output_hw(4, 5).unwrap(), (8, 10));
    }

    #[test]
    fn tap_range_matches_brute_force() {
        for small in 1..6 {
            for big in 1..12 {
                for s in 1..4 {
                    for p in 0..3 {
                        for k in 0..4 {
                            let valid: Vec<usize> = (0..small)
                                .filter(|&o| {
                                    let b = (o * s + k) as isize - p as isize;
                                    b >= 0 && (b as usize) < big
                                })
                                .collect();
                            let (lo, hi) = tap_range(small, big, s, p, k);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), valid, "{small} {big} {s} {p} {k}");
                        }
                    }
                }
            }
        }
    }
}
