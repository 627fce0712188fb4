//! Parameter-free tensor ops and their gradients.

use crate::error::{check_dim, Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu given its forward output (positive exactly where the input was).
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("relu backward", output.shape(), grad_out.shape())?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    check_dim(op, "batch", b.n, a.n)?;
    check_dim(op, "channels", b.c, a.c)?;
    check_dim(op, "height", b.h, a.h)?;
    check_dim(op, "width", b.w, a.w)
}

pub fn add_elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add_elementwise", a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Channels of `a` followed by channels of `b`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    check_dim("concat_channels", "batch", sb.n, sa.n)?;
    check_dim("concat_channels", "height", sb.h, sa.h)?;
    check_dim("concat_channels", "width", sb.w, sa.w)?;
    let plane = sa.plane();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.c * plane..(n + 1) * sa.c * plane]);
        data.extend_from_slice(&b.data()[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    Tensor::from_vec(sa.with_c(sa.c + sb.c), data)
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if first == 0 || first >= s.c {
        return Err(Error::invalid(format!("cannot split {} channels at {first}", s.c)));
    }
    let plane = s.plane();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for n in 0..s.n {
        let item = &x.data()[n * s.c * plane..(n + 1) * s.c * plane];
        a.extend_from_slice(&item[..first * plane]);
        b.extend_from_slice(&item[first * plane..]);
    }
    Ok((Tensor::from_vec(s.with_c(first), a)?, Tensor::from_vec(s.with_c(s.c - first), b)?))
}

/// Appends zero channels up to `channels`. The gradient is the first
/// `input.c` channels of the output gradient.
pub fn pad_channels<T: Scalar>(input: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if channels < s.c {
        return Err(Error::invalid(format!("cannot pad {} channels down to {channels}", s.c)));
    }
    if channels == s.c {
        return Ok(input.clone());
    }
    concat_channels(input, &Tensor::zeros(s.with_c(channels - s.c)))
}

/// Each pixel becomes a 2×2 block.
pub fn upsample_nearest2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let (h2, w2) = (2 * s.h, 2 * s.w);
    let mut data = Vec::with_capacity(4 * input.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for y in 0..h2 {
                let row = &src[(y / 2) * s.w..(y / 2 + 1) * s.w];
                for x in 0..w2 {
                    data.push(row[x / 2]);
                }
            }
        }
    }
    Tensor::from_vec(s.with_hw(h2, w2), data).expect("sized")
}

pub fn upsample_nearest2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let s = grad_out.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::invalid(format!("upsample gradient {s} has odd spatial dims")));
    }
    let small = s.with_hw(s.h / 2, s.w / 2);
    let mut gx = Tensor::zeros(small);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad_out.plane(n, c);
            let base = gx.index(n, c, 0, 0);
            let dst = &mut gx.data_mut()[base..base + small.plane()];
            for y in 0..s.h {
                for x in 0..s.w {
                    dst[(y / 2) * small.w + x / 2] += src[y * s.w + x];
                }
            }
        }
    }
    Ok(gx)
}

/// Per-pixel softmax across channels, with max subtraction.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.c < 2 {
        return Err(Error::invalid(format!("softmax over channels needs C >= 2, got {}", s.c)));
    }
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    let mut exps = vec![0.0f64; s.c];
    for n in 0..s.n {
        for p in 0..plane {
            let at = |c: usize| input.data()[(n * s.c + c) * plane + p].as_f64();
            let max = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (c, e) in exps.iter_mut().enumerate() {
                *e = (at(c) - max).exp();
                total += *e;
            }
            for (c, e) in exps.iter().enumerate() {
                out.data_mut()[(n * s.c + c) * plane + p] = T::of(e / total);
            }
        }
    }
    Ok(out)
}
