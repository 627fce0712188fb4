mod common;

use common::{naive_conv, naive_maxpool, naive_transposed, random_tensor, rng, to_f64};
use navseg::ops::*;
use navseg::{Error, Tensor};
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && common::max_rel_err(a, b, 1e-9) <= tol
}

fn weights(seed: u64, kind: ConvKind, co: usize, ci: usize, k: usize, s: usize, p: usize) -> ConvWeights<f64> {
    let mut r = rng(seed);
    let mut w = ConvWeights::new(kind, co, ci, k, s, p, true).unwrap();
    w.kernel = random_tensor(&mut r, w.kernel.shape());
    w.bias = Some(random_tensor(&mut r, (1, co, 1, 1)));
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, ci in 1usize..5, co in 1usize..5, h in 1usize..10, w in 1usize..10,
        k in prop::sample::select(vec![1usize, 2, 3, 5]), s in 1usize..4, seed in any::<u64>(),
    ) {
        let p = k / 2;
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let wt = weights(seed, ConvKind::Standard, co, ci, k, s, p);
        let x = random_tensor::<f64>(&mut rng(seed ^ 1), (n, ci, h, w));
        let y = conv2d(&x, &wt).unwrap();
        prop_assert_eq!(y.shape().c, co);
        prop_assert!(close(&to_f64(&y), &naive_conv(&x, &wt), 1e-10));
    }

    #[test]
    fn depthwise_matches_direct_loops(
        c in 1usize..6, h in 2usize..10, w in 2usize..10, s in 1usize..3, seed in any::<u64>(),
    ) {
        let wt = weights(seed, ConvKind::Depthwise, c, c, 3, s, 1);
        let x = random_tensor::<f64>(&mut rng(seed ^ 2), (2, c, h, w));
        let y = depthwise_conv2d(&x, &wt).unwrap();
        prop_assert!(close(&to_f64(&y), &naive_conv(&x, &wt), 1e-10));
    }

    #[test]
    fn transposed_matches_scatter(
        ci in 1usize..5, co in 1usize..5, h in 1usize..7, w in 1usize..7, seed in any::<u64>(),
        geo in prop::sample::select(vec![(3usize, 2usize, 1usize), (2, 2, 0), (4, 2, 1), (3, 1, 1), (5, 3, 1)]),
    ) {
        let (k, s, p) = geo;
        let wt = weights(seed, ConvKind::Transposed, co, ci, k, s, p);
        let x = random_tensor::<f64>(&mut rng(seed ^ 3), (1, ci, h, w));
        let y = transposed_conv2d(&x, &wt).unwrap();
        prop_assert_eq!((y.shape().h, y.shape().w), (s * h, s * w));
        prop_assert!(close(&to_f64(&y), &naive_transposed(&x, &wt), 1e-10));
    }

    #[test]
    fn maxpool_matches_window_max(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = random_tensor::<f32>(&mut rng(seed), (2, c, 2 * h, 2 * w));
        let y = maxpool2d(&x).unwrap();
        prop_assert_eq!(to_f64(&y), naive_maxpool(&x));
    }

    /// conv(a·x + b·z) = a·conv(x) + b·conv(z) when the bias is zero.
    #[test]
    fn conv_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let wt = weights(seed, ConvKind::Standard, 3, 2, 3, 1, 1).without_bias();
        let mut r = rng(seed ^ 4);
        let x = random_tensor::<f64>(&mut r, (1, 2, 5, 6));
        let z = random_tensor::<f64>(&mut r, (1, 2, 5, 6));
        let mix = Tensor::from_vec(x.shape(), x.data().iter().zip(z.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = to_f64(&conv2d(&mix, &wt).unwrap());
        let (cx, cz) = (conv2d(&x, &wt).unwrap(), conv2d(&z, &wt).unwrap());
        let rhs: Vec<f64> = cx.data().iter().zip(cz.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(lhs.iter().zip(&rhs).all(|(p, q)| (p - q).abs() <= 1e-10 * (1.0 + q.abs())));
    }

    /// <conv(x), y> = <x, convᵀ(y)>: the transposed kernel is the adjoint.
    #[test]
    fn transposed_is_adjoint_of_strided_conv(ci in 1usize..4, co in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut down = weights(seed, ConvKind::Standard, co, ci, 3, 2, 1).without_bias();
        // Convᵀ maps co -> ci channels with the same taps.
        let mut up = ConvWeights::<f64>::transposed(ci, co, 3, 2, 1).unwrap().without_bias();
        up.kernel = Tensor::from_fn((ci, co, 3, 3), |i, o, y, x| down.kernel.at(o, i, y, x));
        down.bias = None;
        let mut r = rng(seed ^ 5);
        let big = random_tensor::<f64>(&mut r, (1, ci, 2 * h, 2 * w));
        let small = random_tensor::<f64>(&mut r, (1, co, h, w));
        let lhs: f64 = conv2d(&big, &down).unwrap().data().iter().zip(small.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = transposed_conv2d(&small, &up).unwrap().data().iter().zip(big.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn softmax_rows_sum_to_one(c in 2usize..6, h in 1usize..5, w in 1usize..5, scale in 0.1f64..200.0, seed in any::<u64>()) {
        let x = random_tensor::<f32>(&mut rng(seed), (2, c, h, w)).map(|v| v * scale as f32);
        let p = softmax_channels(&x).unwrap();
        prop_assert!(p.is_finite());
        for n in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    let s: f64 = (0..c).map(|ch| p.at(n, ch, y, xx) as f64).sum();
                    prop_assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn relu_is_idempotent_and_nonnegative(seed in any::<u64>()) {
        let x = random_tensor::<f32>(&mut rng(seed), (1, 3, 4, 4));
        let y = relu(&x);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(relu(&y), y);
    }

    #[test]
    fn split_undoes_concat(a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor::<f32>(&mut r, (2, a, 3, 2));
        let z = random_tensor::<f32>(&mut r, (2, b, 3, 2));
        let (p, q) = split_channels(&concat_channels(&x, &z).unwrap(), a).unwrap();
        prop_assert_eq!(p, x);
        prop_assert_eq!(q, z);
    }

    #[test]
    fn upsample_then_pool_is_identity(seed in any::<u64>()) {
        let x = random_tensor::<f32>(&mut rng(seed), (1, 2, 3, 5));
        prop_assert_eq!(maxpool2d(&upsample_nearest2x(&x)).unwrap(), x);
    }
}

#[test]
fn pad_channels_appends_zeros() {
    let x = Tensor::<f32>::full((1, 2, 2, 2), 1.5);
    let y = pad_channels(&x, 5).unwrap();
    assert_eq!(y.shape().c, 5);
    assert_eq!(y.sum(), 1.5 * 8.0);
    assert!(pad_channels(&x, 1).is_err());
}

#[test]
fn rejects_bad_geometry() {
    let x = Tensor::<f32>::zeros((1, 3, 4, 4));
    let wt = ConvWeights::<f32>::standard(2, 4, 3, 1, 1).unwrap();
    assert!(matches!(conv2d(&x, &wt), Err(Error::Shape { .. })));
    let dw = ConvWeights::<f32>::depthwise(3, 3, 1, 1).unwrap();
    assert!(conv2d(&x, &dw).is_err(), "kind mismatch must be rejected");
    assert!(maxpool2d(&Tensor::<f32>::zeros((1, 1, 3, 4))).is_err());
    assert!(ConvWeights::<f32>::new(ConvKind::Depthwise, 3, 4, 3, 1, 1, true).is_err());
    assert!(ConvWeights::<f32>::transposed(2, 2, 3, 2, 0).unwrap().apply(&x).is_err());
    let tiny = Tensor::<f32>::zeros((1, 3, 2, 2));
    assert!(conv2d(&tiny, &ConvWeights::standard(1, 3, 5, 1, 0).unwrap()).is_err());
}

#[test]
fn non_finite_weights_are_reported() {
    let x = Tensor::<f32>::zeros((1, 1, 3, 3));
    let mut wt = ConvWeights::<f32>::standard(1, 1, 3, 1, 1).unwrap();
    wt.kernel.data_mut()[4] = f32::NAN;
    let err = conv2d(&x, &wt).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn batchnorm_train_normalizes_and_infer_uses_running_stats() {
    let x = random_tensor::<f64>(&mut rng(9), (4, 3, 3, 3)).map(|v| 5.0 * v + 2.0);
    let mut p = BatchNormParams::<f64>::new(3);
    let (y, _) = batchnorm(&x, &mut p, Mode::Train).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
    assert!(p.running_mean.iter().any(|&m| m != 0.0), "running mean should move");
    let q = BatchNormParams::<f64>::new(3);
    let yi = batchnorm_infer(&x, &q).unwrap();
    let expect = 1.0 / (1.0 + q.eps).sqrt();
    assert!((yi.data()[0] - x.data()[0] * expect).abs() < 1e-12);
}
