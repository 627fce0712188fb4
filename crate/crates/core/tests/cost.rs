mod common;

use common::Ratio;
use navseg::blocks::{shape_trace, Shortcut};
use navseg::costmodel::*;
use navseg::layer::Sequential;
use navseg::ops::ConvKind;
use navseg::{build_network, NetworkSpec, Shape, Variant};
use proptest::prelude::*;

/// MACs of a layer stack counted from the built weights, layer by layer.
fn walk_macs(seq: &Sequential<f32>, mut shape: Shape) -> u64 {
    let mut total = 0u64;
    for l in &seq.layers {
        let out = l.output_shape(shape).unwrap();
        if let Some(w) = l.as_conv() {
            let ks = w.kernel.shape();
            let taps = (ks.c * ks.h * ks.w) as u64;
            total += match w.kind {
                ConvKind::Transposed => taps * ks.n as u64 * shape.plane() as u64,
                _ => taps * ks.n as u64 * out.plane() as u64,
            };
        }
        shape = out;
    }
    total
}

proptest! {
    #[test]
    fn ratio_identity_in_rationals(k in 1u64..8, ci in 1u64..600, co in 1u64..600, h in 1u64..300, w in 1u64..300) {
        let sep = separable_conv_cost(k, ci, co, h, w).unwrap();
        let std = standard_conv_cost(k, ci, co, h, w).unwrap();
        prop_assert_eq!(Ratio::new(sep as u128, std as u128), Ratio::new(1, co as u128).add(Ratio::new(1, (k * k) as u128)));
        prop_assert!((sep as f64 / std as f64 - cost_reduction_ratio(k, co)).abs() < 1e-12);
    }

    #[test]
    fn costs_grow_with_every_argument(k in 1u64..6, ci in 1u64..64, co in 1u64..64, h in 1u64..64, w in 1u64..64) {
        let s = standard_conv_cost(k, ci, co, h, w).unwrap();
        let p = separable_conv_cost(k, ci, co, h, w).unwrap();
        for (f, base) in [(standard_conv_cost as fn(u64, u64, u64, u64, u64) -> navseg::Result<u64>, s), (separable_conv_cost, p)] {
            prop_assert!(f(k + 1, ci, co, h, w).unwrap() > base);
            prop_assert!(f(k, ci + 1, co, h, w).unwrap() > base);
            prop_assert!(f(k, ci, co + 1, h, w).unwrap() >= base);
            prop_assert!(f(k, ci, co, h + 1, w).unwrap() > base);
            prop_assert!(f(k, ci, co, h, w + 1).unwrap() > base);
        }
    }

    /// The analytic per-block MAC formulas agree with counting the built layers.
    #[test]
    fn report_matches_layer_walk(hm in 1usize..6, wm in 1usize..6, pruned in any::<bool>()) {
        let variant = if pruned { Variant::Pruned } else { Variant::Full };
        let input = Shape::new(1, 3, 8 * hm, 8 * wm);
        let spec = NetworkSpec::new(variant);
        let report = network_cost_report(&spec, input).unwrap();
        let net = build_network(variant, 0);
        let trace = shape_trace(&spec, input).unwrap();
        for ((row, cost), block) in trace.iter().zip(&report.per_block).zip(&net.blocks) {
            let mut macs = walk_macs(&block.main, row.input);
            if let Shortcut::Project(seq) = &block.shortcut {
                macs += walk_macs(seq, row.input);
            }
            prop_assert_eq!(cost.macs, macs, "block {}", row.block);
            prop_assert_eq!(cost.params as usize, block.param_count());
            prop_assert_eq!(cost.bytes, 4 * cost.params);
        }
        prop_assert_eq!(report.totals.macs, report.per_block.iter().map(|b| b.macs).sum::<u64>());
    }
}

#[test]
fn zero_and_overflow_are_errors() {
    assert!(standard_conv_cost(0, 1, 1, 1, 1).is_err());
    assert!(separable_conv_cost(3, 1, 0, 1, 1).is_err());
    assert!(standard_conv_cost(u64::MAX, 2, 2, 1, 1).is_err());
}

#[test]
fn pruned_network_is_cheaper() {
    let input = Shape::new(1, 3, 256, 512);
    let full = network_cost_report(&NetworkSpec::new(Variant::Full), input).unwrap();
    let pruned = network_cost_report(&NetworkSpec::new(Variant::Pruned), input).unwrap();
    assert!(pruned.totals.macs < full.totals.macs);
    assert!(pruned.totals.params < full.totals.params);
    assert_eq!(full.totals.params as usize, count_params(&build_network(Variant::Full, 0)));
    assert_eq!(pruned.totals.macs, 289_570_816);
    let table = full.to_table();
    assert_eq!(table.lines().count(), 2 + 30 + 1);
}

#[test]
fn model_size_is_file_size() {
    for variant in [Variant::Full, Variant::Pruned] {
        let net = build_network(variant, 1);
        assert_eq!(model_size_bytes(&net), navseg::dataio::model_io::encode(&net).len());
    }
    let full = model_size_bytes(&build_network(Variant::Full, 0));
    let pruned = model_size_bytes(&build_network(Variant::Pruned, 0));
    assert!(pruned < full);
}
