//! L1-norm filter ranking and structured removal.
//!
//! A [`PrunePlan`] lists output filters to delete (`removals`) and, for every
//! consumer of those filters' feature maps, the channels that disappear with
//! them (`propagation`): input channels of later convolutions, depthwise
//! channels, batchnorm slots and the zero-padded tail of a Downsample
//! shortcut. Applying a plan never changes a surviving weight value.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::blocks::{slot, Block, BlockKind, Branch, LayerId, Network, NetworkSpec, Shortcut, Variant, BOTTLENECK_BLOCKS};
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::layer::{Layer, Sequential};
use crate::ops::{BatchNormParams, ConvKind, ConvWeights};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{evaluate, evaluate_loss, train, History, Metrics, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterRank {
    pub layer: LayerId,
    pub filter: usize,
    pub l1: f64,
}

fn conv_at<T: Scalar>(net: &Network<T>, id: LayerId) -> Result<&ConvWeights<T>> {
    net.layer(id)
        .ok_or_else(|| Error::invalid(format!("no layer {id}")))?
        .as_conv()
        .ok_or_else(|| Error::invalid(format!("layer {id} is not a convolution")))
}

/// One rank per output filter: the sum of absolute kernel coefficients
/// (bias excluded), accumulated in f64. Ascending; ties keep index order.
pub fn filter_l1_norms<T: Scalar>(net: &Network<T>, id: LayerId) -> Result<Vec<FilterRank>> {
    Ok(conv_l1_norms(conv_at(net, id)?, id))
}

fn conv_l1_norms<T: Scalar>(w: &ConvWeights<T>, id: LayerId) -> Vec<FilterRank> {
    let mut ranks: Vec<FilterRank> = (0..w.out_channels())
        .map(|o| FilterRank {
            layer: id,
            filter: o,
            l1: w.filter(o).iter().map(|v| v.as_f64().abs()).sum(),
        })
        .collect();
    ranks.sort_by(|a, b| a.l1.total_cmp(&b.l1));
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrunePolicy {
    /// Halve every 128-wide layer of blocks 7–24 and their internal projections.
    Halve128,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrunePlan {
    pub removals: BTreeMap<LayerId, Vec<usize>>,
    pub propagation: BTreeMap<LayerId, Vec<usize>>,
}

impl PrunePlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn remove(&mut self, id: LayerId, set: &[usize]) {
        self.removals.insert(id, set.to_vec());
    }

    fn propagate(&mut self, id: LayerId, set: &[usize]) {
        self.propagation.insert(id, set.to_vec());
    }

    pub fn filters_removed(&self) -> usize {
        self.removals.values().map(Vec::len).sum()
    }
}

fn lowest_half(ranks: &[FilterRank]) -> Vec<usize> {
    let mut set: Vec<usize> = ranks[..ranks.len() / 2].iter().map(|r| r.filter).collect();
    set.sort_unstable();
    set
}

/// Builds the halving plan for a full-width network.
///
/// Blocks 7–24 share one residual stream, so their expansion filters must lose
/// the same channel indices. Each stream channel is scored by the summed L1 of
/// the expansion filters writing it; the lowest-scoring half is removed from
/// every expansion conv and batchnorm, from the inputs of blocks 8–25, and
/// from the padding of block 7's shortcut. Each block's internal projection is
/// halved by its own filter ranking.
pub fn select_prune_set<T: Scalar>(net: &Network<T>, policy: PrunePolicy) -> Result<PrunePlan> {
    let PrunePolicy::Halve128 = policy;
    let full = NetworkSpec::new(Variant::Full);
    if net.spec.blocks != full.blocks {
        return Err(Error::invalid(
            "halve-128 applies only to the unpruned full-width network (already pruned or different architecture)",
        ));
    }
    let first = *BOTTLENECK_BLOCKS.start();
    let last = *BOTTLENECK_BLOCKS.end();
    let width = net.spec.blocks[first].out_channels;
    let mut score = vec![0.0f64; width];
    for b in BOTTLENECK_BLOCKS {
        for r in filter_l1_norms(net, LayerId::main(b, slot::EXPAND))? {
            score[r.filter] += r.l1;
        }
    }
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let mut stream: Vec<usize> = order[..width / 2].to_vec();
    stream.sort_unstable();

    let mut plan = PrunePlan::default();
    for b in BOTTLENECK_BLOCKS {
        let internal = lowest_half(&filter_l1_norms(net, LayerId::main(b, slot::PROJECT))?);
        plan.remove(LayerId::main(b, slot::PROJECT), &internal);
        plan.propagate(LayerId::main(b, slot::SPATIAL), &internal);
        plan.remove(LayerId::main(b, slot::EXPAND), &stream);
        plan.propagate(LayerId::main(b, slot::EXPAND), &internal);
        plan.propagate(LayerId::main(b, slot::NORM), &stream);
        if b > first {
            plan.propagate(LayerId::main(b, slot::PROJECT), &stream);
        }
    }
    plan.propagate(LayerId::shortcut(first, 0), &stream);
    plan.propagate(LayerId::main(last + 1, slot::PROJECT), &stream);
    plan.propagate(LayerId::shortcut(last + 1, slot::SHORTCUT_PROJECT), &stream);
    Ok(plan)
}

fn keep_list(len: usize, removed: &[usize], id: LayerId) -> Result<Vec<usize>> {
    let mismatch = |reason: String| Error::PlanMismatch {
        layer: id.to_string(),
        reason,
    };
    let set: BTreeSet<usize> = removed.iter().copied().collect();
    if set.len() != removed.len() {
        return Err(mismatch("duplicate indices".into()));
    }
    if let Some(&bad) = set.iter().find(|&&i| i >= len) {
        return Err(mismatch(format!("index {bad} out of range for {len} channels")));
    }
    if set.len() == len {
        return Err(mismatch(format!("would remove all {len} channels")));
    }
    Ok((0..len).filter(|i| !set.contains(i)).collect())
}

fn take_axis<T: Scalar>(t: &Tensor<T>, axis: usize, keep: &[usize]) -> Tensor<T> {
    let s = t.shape();
    match axis {
        0 => Tensor::from_fn(s.with_n(keep.len()), |n, c, y, x| t.at(keep[n], c, y, x)),
        _ => Tensor::from_fn(s.with_c(keep.len()), |n, c, y, x| t.at(n, keep[c], y, x)),
    }
}

fn drop_outputs<T: Scalar>(w: &mut ConvWeights<T>, removed: &[usize], id: LayerId) -> Result<()> {
    let keep = keep_list(w.out_channels(), removed, id)?;
    w.kernel = take_axis(&w.kernel, 0, &keep);
    if let Some(b) = w.bias.as_mut() {
        *b = take_axis(b, 1, &keep);
    }
    Ok(())
}

fn drop_inputs<T: Scalar>(w: &mut ConvWeights<T>, removed: &[usize], id: LayerId) -> Result<()> {
    if w.kind == ConvKind::Depthwise {
        return drop_outputs(w, removed, id);
    }
    let keep = keep_list(w.in_channels(), removed, id)?;
    w.kernel = take_axis(&w.kernel, 1, &keep);
    Ok(())
}

fn drop_bn<T: Scalar>(p: &mut BatchNormParams<T>, removed: &[usize], id: LayerId) -> Result<()> {
    let keep = keep_list(p.channels(), removed, id)?;
    p.gamma = take_axis(&p.gamma, 1, &keep);
    p.beta = take_axis(&p.beta, 1, &keep);
    p.running_mean = keep.iter().map(|&i| p.running_mean[i]).collect();
    p.running_var = keep.iter().map(|&i| p.running_var[i]).collect();
    Ok(())
}

fn removed_params_of(layer: &Layer<impl Scalar>, out: usize, inp: usize) -> usize {
    match layer {
        Layer::Conv(_) => {
            let w = layer.as_conv().expect("conv");
            let k2 = w.kernel_size() * w.kernel_size();
            let bias = usize::from(w.bias.is_some());
            let (o, i) = (w.out_channels(), w.kernel.shape().c);
            if w.kind == ConvKind::Depthwise {
                let r = out.max(inp);
                r * (k2 + bias)
            } else {
                (o * i - o.saturating_sub(out) * i.saturating_sub(inp)) * k2 + out * bias
            }
        }
        Layer::BatchNorm(_) => 4 * inp,
        _ => 0,
    }
}

/// Parameters a plan removes, from layer geometry and index-set sizes alone.
pub fn removed_params<T: Scalar>(net: &Network<T>, plan: &PrunePlan) -> Result<usize> {
    let ids: BTreeSet<LayerId> = plan.removals.keys().chain(plan.propagation.keys()).copied().collect();
    let mut total = 0;
    for id in ids {
        let layer = net.layer(id).ok_or_else(|| Error::PlanMismatch {
            layer: id.to_string(),
            reason: "no such layer".into(),
        })?;
        let out = plan.removals.get(&id).map_or(0, Vec::len);
        let inp = plan.propagation.get(&id).map_or(0, Vec::len);
        total += removed_params_of(layer, out, inp);
    }
    Ok(total)
}

fn apply_to_layer<T: Scalar>(block: &mut Block<T>, id: LayerId, out: Option<&Vec<usize>>, inp: Option<&Vec<usize>>) -> Result<()> {
    let mismatch = |reason: &str| Error::PlanMismatch {
        layer: id.to_string(),
        reason: reason.into(),
    };
    if id.branch == Branch::Shortcut {
        if let Shortcut::PoolPad { channels, .. } = &mut block.shortcut {
            if out.is_some() {
                return Err(mismatch("a pooling shortcut has no filters to remove"));
            }
            let n = inp.map_or(0, Vec::len);
            keep_list(*channels, inp.map_or(&[][..], |v| v.as_slice()), id)?;
            if *channels - n < block.spec.in_channels {
                return Err(mismatch("padding removal would cut into pooled input channels"));
            }
            *channels -= n;
            return Ok(());
        }
    }
    let layer = match id.branch {
        Branch::Main => block.main.layers.get_mut(id.index),
        Branch::Shortcut => block.shortcut_layers_mut().get_mut(id.index),
    }
    .ok_or_else(|| mismatch("no such layer"))?;
    if let Some(w) = layer.as_conv_mut() {
        if let Some(set) = out {
            drop_outputs(w, set, id)?;
        }
        if let Some(set) = inp {
            drop_inputs(w, set, id)?;
        }
        Ok(())
    } else if let Some(p) = layer.as_batchnorm_mut() {
        if out.is_some() {
            return Err(mismatch("batchnorm has no filters of its own; list it under propagation"));
        }
        drop_bn(p, inp.map_or(&[][..], |v| v.as_slice()), id)
    } else {
        Err(mismatch("layer has no prunable channels"))
    }
}

/// Re-derives a block's spec from its (possibly pruned) layer geometry.
fn derived_spec<T: Scalar>(block: &Block<T>) -> crate::blocks::BlockSpec {
    let mut s = block.spec;
    let conv = |i: usize| block.main.layers[i].as_conv().expect("conv slot");
    match s.kind {
        BlockKind::Initial => {
            s.in_channels = conv(0).in_channels();
            s.out_channels = conv(0).out_channels() + s.in_channels;
            s.internal_channels = s.out_channels;
        }
        BlockKind::Standard | BlockKind::Downsample | BlockKind::Upsample => {
            s.in_channels = conv(slot::PROJECT).in_channels();
            s.internal_channels = conv(slot::PROJECT).out_channels();
            s.out_channels = conv(slot::EXPAND).out_channels();
        }
        BlockKind::LastConv => {
            s.in_channels = conv(0).in_channels();
            s.out_channels = conv(0).out_channels();
            s.internal_channels = s.out_channels;
        }
    }
    s
}

fn layer_geometry<T: Scalar>(l: &Layer<T>) -> Option<String> {
    if let Some(w) = l.as_conv() {
        Some(format!("{} {}", w.kind.name(), w.kernel.shape()))
    } else {
        l.as_batchnorm().map(|p| format!("batchnorm {}", p.channels()))
    }
}

/// Checks every layer against a freshly built block of the derived spec.
fn check_closed<T: Scalar>(bi: usize, block: &Block<T>) -> Result<()> {
    let spec = derived_spec(block);
    let fresh = Block::<T>::from_spec(spec).map_err(|e| Error::PlanMismatch {
        layer: format!("b{:02}", bi + 1),
        reason: e.to_string(),
    })?;
    let pairs = block
        .main
        .layers
        .iter()
        .zip(&fresh.main.layers)
        .enumerate()
        .map(|(i, p)| (LayerId::main(bi, i), p))
        .chain(
            block
                .shortcut_layers()
                .iter()
                .zip(fresh.shortcut_layers())
                .enumerate()
                .map(|(i, p)| (LayerId::shortcut(bi, i), p)),
        );
    for (id, (got, want)) in pairs {
        if layer_geometry(got) != layer_geometry(want) {
            return Err(Error::PlanMismatch {
                layer: id.to_string(),
                reason: format!(
                    "geometry {} is inconsistent with its neighbours (expected {})",
                    layer_geometry(got).unwrap_or_default(),
                    layer_geometry(want).unwrap_or_default()
                ),
            });
        }
    }
    if let (Shortcut::PoolPad { channels, .. }, Shortcut::PoolPad { channels: want, .. }) = (&block.shortcut, &fresh.shortcut) {
        if channels != want {
            return Err(Error::PlanMismatch {
                layer: LayerId::shortcut(bi, 0).to_string(),
                reason: format!("shortcut pads to {channels} channels, block emits {want}"),
            });
        }
    }
    Ok(())
}

/// Returns a new network with the plan's filters and channels physically
/// removed. The input network is untouched.
pub fn apply_prune<T: Scalar>(net: &Network<T>, plan: &PrunePlan) -> Result<Network<T>> {
    let mut out = net.clone();
    out.clear_cache();
    let ids: BTreeSet<LayerId> = plan.removals.keys().chain(plan.propagation.keys()).copied().collect();
    for id in &ids {
        let block = out.blocks.get_mut(id.block).ok_or_else(|| Error::PlanMismatch {
            layer: id.to_string(),
            reason: "no such block".into(),
        })?;
        apply_to_layer(block, *id, plan.removals.get(id), plan.propagation.get(id))?;
    }
    let touched: BTreeSet<usize> = ids.iter().map(|id| id.block).collect();
    for &bi in &touched {
        check_closed(bi, &out.blocks[bi])?;
        let spec = derived_spec(&out.blocks[bi]);
        out.blocks[bi].spec = spec;
        out.spec.blocks[bi] = spec;
    }
    out.spec.validate().map_err(|e| Error::PlanMismatch {
        layer: "network".into(),
        reason: e.to_string(),
    })?;
    if out.spec.blocks == NetworkSpec::new(Variant::Pruned).blocks {
        out.spec.variant = Variant::Pruned;
        out.meta.name = format!("navseg-{}", Variant::Pruned.name());
    }
    out.meta.prune_history.push(format!(
        "removed {} filters across {} layers ({} parameters)",
        plan.filters_removed(),
        ids.len(),
        net.param_count() - out.param_count()
    ));
    Ok(out)
}

/// Removes output filters from convolutions of a plain layer stack, dropping
/// the matching channels downstream: through parameter-free layers, batchnorm
/// and depthwise convs, up to and including the next channel-mixing conv.
pub fn prune_sequential<T: Scalar>(seq: &Sequential<T>, removals: &BTreeMap<usize, Vec<usize>>) -> Result<Sequential<T>> {
    let mut out = seq.clone();
    out.clear_cache();
    let id = |i: usize| LayerId::main(0, i);
    for (&i, set) in removals {
        let w = out
            .layers
            .get_mut(i)
            .and_then(Layer::as_conv_mut)
            .ok_or_else(|| Error::PlanMismatch {
                layer: id(i).to_string(),
                reason: "not a convolution".into(),
            })?;
        drop_outputs(w, set, id(i))?;
        let mut j = i + 1;
        loop {
            let Some(next) = out.layers.get_mut(j) else {
                return Err(Error::PlanMismatch {
                    layer: id(i).to_string(),
                    reason: "removing filters of the final channel-producing layer changes the output".into(),
                });
            };
            if let Some(p) = next.as_batchnorm_mut() {
                drop_bn(p, set, id(j))?;
            } else if let Some(w) = next.as_conv_mut() {
                drop_inputs(w, set, id(j))?;
                if w.kind != ConvKind::Depthwise {
                    break;
                }
            }
            j += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub history: History,
    /// Held-out metrics immediately after pruning and after fine-tuning.
    pub before: Metrics,
    pub after: Metrics,
    /// Inference-mode training-set loss immediately after pruning and after fine-tuning.
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Continues training a pruned network from its surviving weights.
pub fn fine_tune(net: &mut Network<f32>, train_set: &[Sample], held_out: &[Sample], cfg: &TrainConfig) -> Result<FineTuneReport> {
    if train_set.is_empty() {
        return Err(Error::invalid("fine-tuning dataset is empty"));
    }
    let before = evaluate(net, held_out)?;
    let loss_before = evaluate_loss(net, train_set)?;
    let history = train(net, train_set, cfg)?;
    let (after, loss_after) = if cfg.steps == 0 {
        (before, loss_before)
    } else {
        (evaluate(net, held_out)?, evaluate_loss(net, train_set)?)
    };
    Ok(FineTuneReport {
        history,
        before,
        after,
        loss_before,
        loss_after,
    })
}
