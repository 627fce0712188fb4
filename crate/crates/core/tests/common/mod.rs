//! Naive reference implementations and finite-difference helpers shared by
//! the integration tests. Everything here is written for clarity, not speed,
//! and computes in f64 regardless of the tensor type.

#![allow(dead_code)]

use navseg::ops::{ConvKind, ConvWeights, Mode};
use navseg::optim::Parameterized;
use navseg::{Scalar, Shape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut impl Rng, shape: impl Into<Shape>) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::of(rng.gen_range(-1.0..1.0)))
}

/// Values spread at least `gap` apart, shuffled, so max-pool and ReLU have no
/// near-ties for small perturbations.
pub fn separated_tensor<T: Scalar>(rng: &mut impl Rng, shape: impl Into<Shape>, gap: f64) -> Tensor<T> {
    let shape = shape.into();
    let n = shape.numel();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, vals.into_iter().map(T::of).collect()).unwrap()
}

fn at(t: &Tensor<impl Scalar>, n: usize, c: usize, y: usize, x: usize) -> f64 {
    t.at(n, c, y, x).as_f64()
}

fn bias_at<T: Scalar>(w: &ConvWeights<T>, o: usize) -> f64 {
    w.bias.as_ref().map_or(0.0, |b| b.data()[o].as_f64())
}

/// Direct six-loop correlation. Handles standard and pointwise kernels
/// `(C_out, C_in, K, K)` and depthwise kernels `(C, 1, K, K)`.
pub fn naive_conv<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>) -> Vec<f64> {
    let s = x.shape();
    let ks = w.kernel.shape();
    let (k, st, p) = (ks.h, w.stride, w.padding);
    let ho = (s.h + 2 * p - k) / st + 1;
    let wo = (s.w + 2 * p - k) / st + 1;
    let co = ks.n;
    let mut out = vec![0.0; s.n * co * ho * wo];
    for n in 0..s.n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias_at(w, o);
                    let inputs: Vec<(usize, usize)> = match w.kind {
                        ConvKind::Depthwise => vec![(o, 0)],
                        _ => (0..s.c).map(|c| (c, c)).collect(),
                    };
                    for (c, kc) in inputs {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * st + ky) as isize - p as isize;
                                let ix = (ox * st + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += at(x, n, c, iy as usize, ix as usize) * at(&w.kernel, o, kc, ky, kx);
                            }
                        }
                    }
                    out[((n * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution: every input pixel adds a
/// scaled kernel into the `stride×` output, and taps falling outside are cut.
pub fn naive_transposed<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>) -> Vec<f64> {
    let s = x.shape();
    let ks = w.kernel.shape();
    let (k, st, p) = (ks.h, w.stride, w.padding);
    let (ho, wo, co) = (s.h * st, s.w * st, ks.n);
    let mut out = vec![0.0; s.n * co * ho * wo];
    for n in 0..s.n {
        for o in 0..co {
            for v in out[(n * co + o) * ho * wo..(n * co + o + 1) * ho * wo].iter_mut() {
                *v = bias_at(w, o);
            }
        }
        for c in 0..s.c {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let v = at(x, n, c, iy, ix);
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * st + ky) as isize - p as isize;
                                let ox = (ix * st + kx) as isize - p as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                out[((n * co + o) * ho + oy as usize) * wo + ox as usize] +=
                                    v * at(&w.kernel, o, c, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2, stride 2 max over each window.
pub fn naive_maxpool<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let s = x.shape();
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.n * s.c * ho * wo);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(at(x, n, c, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired elements.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// Something with a training forward, a backward and trainable tensors.
pub trait Module<T: Scalar>: Parameterized<T> + Clone {
    fn fwd(&mut self, x: &Tensor<T>) -> Tensor<T>;
    fn bwd(&mut self, g: &Tensor<T>) -> Tensor<T>;
}

impl<T: Scalar> Module<T> for navseg::layer::Layer<T> {
    fn fwd(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.forward(x, Mode::Train).unwrap()
    }
    fn bwd(&mut self, g: &Tensor<T>) -> Tensor<T> {
        self.backward(g).unwrap()
    }
}

impl<T: Scalar> Module<T> for navseg::layer::Sequential<T> {
    fn fwd(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.forward(x, Mode::Train).unwrap()
    }
    fn bwd(&mut self, g: &Tensor<T>) -> Tensor<T> {
        self.backward(g).unwrap()
    }
}

impl<T: Scalar> Module<T> for navseg::blocks::Block<T> {
    fn fwd(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.forward(x, Mode::Train).unwrap()
    }
    fn bwd(&mut self, g: &Tensor<T>) -> Tensor<T> {
        self.backward(g).unwrap()
    }
}

impl<T: Scalar> Module<T> for navseg::Network<T> {
    fn fwd(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.forward(x, Mode::Train).unwrap()
    }
    fn bwd(&mut self, g: &Tensor<T>) -> Tensor<T> {
        self.backward(g).unwrap()
    }
}

/// Scalar probe loss `sum(r ⊙ y)`, accumulated in f64.
fn probe_loss<T: Scalar>(y: &Tensor<T>, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a.as_f64() * b).sum()
}

fn flat_params<T: Scalar, M: Module<T>>(m: &mut M) -> Vec<T> {
    let mut v = Vec::new();
    m.visit_params(&mut |t| v.extend_from_slice(t.data()));
    v
}

fn flat_grads<T: Scalar, M: Module<T>>(m: &mut M) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit_params(&mut |t| match t.grad() {
        Some(g) => v.extend(g.iter().map(|x| x.as_f64())),
        None => v.extend(std::iter::repeat_n(0.0, t.len())),
    });
    v
}

fn set_param<T: Scalar, M: Module<T>>(m: &mut M, index: usize, value: T) {
    let mut offset = 0;
    m.visit_params(&mut |t| {
        if (offset..offset + t.len()).contains(&index) {
            t.data_mut()[index - offset] = value;
        }
        offset += t.len();
    });
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Worst relative error over checked parameter entries.
    pub params: f64,
    /// Worst relative error over checked input entries.
    pub input: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.params.max(self.input)
    }
}

/// Compares analytic gradients of `sum(r ⊙ m(x))` with central differences.
///
/// At most `limit` entries of the parameters and of the input are probed,
/// chosen at random. Relative error uses `max(|a|, |n|, floor)` as the
/// denominator so entries with a true gradient of zero do not divide by
/// rounding noise.
pub fn grad_check<T: Scalar, M: Module<T>>(
    module: &M,
    x: &Tensor<T>,
    h: f64,
    floor: f64,
    limit: usize,
    seed: u64,
) -> GradCheck {
    let mut rng = rng(seed);
    let mut m = module.clone();
    m.zero_grad();
    let y = m.fwd(x);
    let r: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = Tensor::from_vec(y.shape(), r.iter().map(|&v| T::of(v)).collect()).unwrap();
    let gx = to_f64(&m.bwd(&g));
    let gp = flat_grads(&mut m);

    let base = flat_params(&mut module.clone());
    let mut pick = |len: usize| -> Vec<usize> {
        if len <= limit {
            (0..len).collect()
        } else {
            (0..limit).map(|_| rng.gen_range(0..len)).collect()
        }
    };
    let pidx = pick(base.len());
    let xidx = pick(x.len());

    let eval_param = |i: usize, delta: f64| {
        let mut mm = module.clone();
        set_param(&mut mm, i, T::of(base[i].as_f64() + delta));
        probe_loss(&mm.fwd(x), &r)
    };
    let mut worst_p: f64 = 0.0;
    for &i in &pidx {
        let num = (eval_param(i, h) - eval_param(i, -h)) / (2.0 * h);
        worst_p = worst_p.max((num - gp[i]).abs() / num.abs().max(gp[i].abs()).max(floor));
    }

    let eval_input = |i: usize, delta: f64| {
        let mut xx = x.clone();
        xx.data_mut()[i] = T::of(x.data()[i].as_f64() + delta);
        probe_loss(&module.clone().fwd(&xx), &r)
    };
    let mut worst_x: f64 = 0.0;
    for &i in &xidx {
        let num = (eval_input(i, h) - eval_input(i, -h)) / (2.0 * h);
        worst_x = worst_x.max((num - gx[i]).abs() / num.abs().max(gx[i].abs()).max(floor));
    }
    GradCheck {
        params: worst_p,
        input: worst_x,
        checked: pidx.len() + xidx.len(),
    }
}

/// Exact rational `a/b` reduced, for cost identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u128,
    pub den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Ratio {
    pub fn new(num: u128, den: u128) -> Self {
        assert!(den != 0);
        let g = gcd(num, den).max(1);
        Self { num: num / g, den: den / g }
    }

    pub fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
}
