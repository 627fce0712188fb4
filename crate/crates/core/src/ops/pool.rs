//! 2×2, stride-2 max pooling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

fn pooled_shape(s: Shape) -> Result<Shape> {
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "maxpool2d needs even spatial dims, got height {} width {}",
            s.h, s.w
        )));
    }
    Ok(s.with_hw(s.h / 2, s.w / 2))
}

pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool2d_with_indices(input).map(|(y, _)| y)
}

/// Pooled output plus, per output cell, the in-plane index of the winning
/// input (first maximum in row-major window order).
pub fn maxpool2d_with_indices<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let xs = input.shape();
    let ys = pooled_shape(xs)?;
    let mut out = Vec::with_capacity(ys.numel());
    let mut arg = Vec::with_capacity(ys.numel());
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = input.plane(n, c);
            for oy in 0..ys.h {
                for ox in 0..ys.w {
                    let (i, v) = window_max(src, xs.w, oy, ox);
                    out.push(v);
                    arg.push(i as u32);
                }
            }
        }
    }
    Ok((Tensor::from_vec(ys, out)?, arg))
}

#[inline]
fn window_max<T: Scalar>(src: &[T], w: usize, oy: usize, ox: usize) -> (usize, T) {
    let base = 2 * oy * w + 2 * ox;
    let mut best = (base, src[base]);
    for i in [base + 1, base + w, base + w + 1] {
        if src[i] > best.1 {
            best = (i, src[i]);
        }
    }
    best
}

/// Routes each output gradient to the input position that won its window.
pub fn maxpool2d_backward<T: Scalar>(input_shape: Shape, indices: &[u32], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let ys = pooled_shape(input_shape)?;
    if grad_out.shape() != ys || indices.len() != ys.numel() {
        return Err(Error::invalid(format!(
            "maxpool gradient {} does not match pooled shape {ys}",
            grad_out.shape()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    let plane_in = input_shape.plane();
    let data = gx.data_mut();
    for (idx, (g, &a)) in grad_out.data().iter().zip(indices).enumerate() {
        let plane = idx / ys.plane();
        data[plane * plane_in + a as usize] += *g;
    }
    Ok(gx)
}
