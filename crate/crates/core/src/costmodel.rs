//! Multiply-accumulate and parameter accounting for standard and
//! depthwise-separable convolutions, and whole-network cost reports.
//!
//! Spatial arguments are the positions at which the kernel is applied: output
//! positions for (strided) correlations, input positions for transposed convs.

use serde::{Deserialize, Serialize};

use crate::blocks::{shape_trace, BlockKind, BlockSpec, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

fn product(op: &str, factors: &[u64]) -> Result<u64> {
    if factors.contains(&0) {
        return Err(Error::invalid(format!("{op}: all arguments must be positive, got {factors:?}")));
    }
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::invalid(format!("{op}: MAC count overflows u64 for {factors:?}")))
}

/// K·K·C_in·C_out·H·W.
pub fn standard_conv_cost(k: u64, c_in: u64, c_out: u64, h: u64, w: u64) -> Result<u64> {
    product("standard_conv_cost", &[k, k, c_in, c_out, h, w])
}

/// K·K·C_in·H·W (depthwise) + C_in·C_out·H·W (pointwise).
pub fn separable_conv_cost(k: u64, c_in: u64, c_out: u64, h: u64, w: u64) -> Result<u64> {
    let depthwise = product("separable_conv_cost", &[k, k, c_in, h, w])?;
    let pointwise = product("separable_conv_cost", &[c_in, c_out, h, w])?;
    depthwise
        .checked_add(pointwise)
        .ok_or_else(|| Error::invalid("separable_conv_cost: MAC count overflows u64"))
}

/// Separable over standard cost: 1/C_out + 1/K².
pub fn cost_reduction_ratio(k: u64, c_out: u64) -> f64 {
    1.0 / c_out as f64 + 1.0 / (k * k) as f64
}

/// Stored parameters: kernels, biases and all four batchnorm arrays.
pub fn count_params<T: Scalar>(net: &Network<T>) -> usize {
    net.param_count()
}

/// Exact size of the serialized model file.
pub fn model_size_bytes<T: Scalar>(net: &Network<T>) -> usize {
    crate::dataio::model_io::encoded_len(net)
}

/// Parameters of a block built from `spec`, from geometry alone.
pub fn block_param_count(spec: &BlockSpec) -> usize {
    let (i, o, m) = (spec.in_channels, spec.out_channels, spec.internal_channels);
    let pw = |a: usize, b: usize| a * b + b;
    match spec.kind {
        BlockKind::Initial => 9 * i * (o - i) + (o - i),
        BlockKind::Standard | BlockKind::Downsample => pw(i, m) + (9 * m + m) + pw(m, o) + 4 * o,
        BlockKind::Upsample => pw(i, m) + (9 * m * m + m) + pw(m, o) + 4 * o + pw(i, o),
        BlockKind::LastConv => 9 * i * o + o,
    }
}

fn block_macs(spec: &BlockSpec, input: Shape, output: Shape) -> Result<u64> {
    let (i, o, m) = (spec.in_channels as u64, spec.out_channels as u64, spec.internal_channels as u64);
    let (hi, wi) = (input.h as u64, input.w as u64);
    let (ho, wo) = (output.h as u64, output.w as u64);
    let n = input.n as u64;
    let per_image = match spec.kind {
        BlockKind::Initial => standard_conv_cost(3, i, o - i, ho, wo)?,
        BlockKind::Standard | BlockKind::Downsample => {
            standard_conv_cost(1, i, m, hi, wi)? + separable_conv_cost(3, m, o, ho, wo)?
        }
        BlockKind::Upsample => {
            standard_conv_cost(1, i, m, hi, wi)?
                + standard_conv_cost(3, m, m, hi, wi)?
                + standard_conv_cost(1, m, o, ho, wo)?
                + standard_conv_cost(1, i, o, hi, wi)?
        }
        BlockKind::LastConv => standard_conv_cost(3, i, o, hi, wi)?,
    };
    per_image
        .checked_mul(n)
        .ok_or_else(|| Error::invalid("network MAC count overflows u64"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    /// 1-based.
    pub block: usize,
    pub kind: BlockKind,
    pub macs: u64,
    pub params: u64,
    /// Dense f32 weight bytes (4 per parameter).
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostTotals {
    pub macs: u64,
    pub params: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: String,
    pub input: Shape,
    pub per_block: Vec<BlockCost>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "variant {} input {}x{}x{}\n{:>5}  {:<10} {:>14} {:>10} {:>10}\n",
            self.variant, self.input.w, self.input.h, self.input.c, "block", "type", "MACs", "params", "bytes"
        );
        for b in &self.per_block {
            s += &format!(
                "{:>5}  {:<10} {:>14} {:>10} {:>10}\n",
                b.block,
                b.kind.name(),
                b.macs,
                b.params,
                b.bytes
            );
        }
        s += &format!(
            "{:>5}  {:<10} {:>14} {:>10} {:>10}\n",
            "total", "", self.totals.macs, self.totals.params, self.totals.bytes
        );
        s
    }
}

/// MACs per block count only convolution arithmetic; factorized blocks use the
/// separable formula for depthwise plus expansion and add the 1×1 projection.
pub fn network_cost_report(spec: &NetworkSpec, input: Shape) -> Result<CostReport> {
    let trace = shape_trace(spec, input)?;
    let mut per_block = Vec::with_capacity(trace.len());
    let mut totals = CostTotals::default();
    for (row, b) in trace.iter().zip(&spec.blocks) {
        let macs = block_macs(b, row.input, row.output)?;
        let params = block_param_count(b) as u64;
        let cost = BlockCost {
            block: row.block,
            kind: b.kind,
            macs,
            params,
            bytes: 4 * params,
        };
        totals.macs = totals
            .macs
            .checked_add(macs)
            .ok_or_else(|| Error::invalid("network MAC count overflows u64"))?;
        totals.params += cost.params;
        totals.bytes += cost.bytes;
        per_block.push(cost);
    }
    Ok(CostReport {
        variant: spec.variant.name().to_string(),
        input,
        per_block,
        totals,
    })
}
