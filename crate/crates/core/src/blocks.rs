//! Initial, factorized (Standard/Downsample), Upsample and LastConv blocks and
//! the 30-block encoder-decoder assembled from them.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::layer::{Layer, Sequential};
use crate::ops::{add_elementwise, concat_channels, pad_channels, relu, relu_backward, split_channels, BatchNormParams, ConvWeights, Mode};
use crate::optim::Parameterized;
use crate::tensor::{Scalar, Shape, Tensor};

/// Positions of the layers inside a factorized or upsample main branch.
pub mod slot {
    pub const PROJECT: usize = 0;
    pub const PROJECT_RELU: usize = 1;
    /// Depthwise conv in factorized blocks, transposed conv in upsample blocks.
    pub const SPATIAL: usize = 2;
    pub const EXPAND: usize = 3;
    pub const NORM: usize = 4;
    /// The 1×1 projection on an upsample block's shortcut.
    pub const SHORTCUT_PROJECT: usize = 0;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Initial,
    Downsample,
    Standard,
    Upsample,
    LastConv,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Initial => "Initial",
            BlockKind::Downsample => "Downsample",
            BlockKind::Standard => "Standard",
            BlockKind::Upsample => "Upsample",
            BlockKind::LastConv => "LastConv",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            BlockKind::Initial => 0,
            BlockKind::Downsample => 1,
            BlockKind::Standard => 2,
            BlockKind::Upsample => 3,
            BlockKind::LastConv => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => BlockKind::Initial,
            1 => BlockKind::Downsample,
            2 => BlockKind::Standard,
            3 => BlockKind::Upsample,
            4 => BlockKind::LastConv,
            _ => return None,
        })
    }

    /// Spatial scale as (numerator, denominator).
    fn scale(self) -> (usize, usize) {
        match self {
            BlockKind::Initial | BlockKind::Downsample => (1, 2),
            BlockKind::Standard => (1, 1),
            BlockKind::Upsample | BlockKind::LastConv => (2, 1),
        }
    }
}

/// Projection width used inside factorized and upsample blocks.
pub fn default_internal(out_channels: usize) -> usize {
    (out_channels / 4).max(8).min(out_channels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub internal_channels: usize,
}

impl BlockSpec {
    pub fn initial(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: BlockKind::Initial,
            in_channels,
            out_channels,
            internal_channels: out_channels,
        }
    }

    pub fn downsample(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: BlockKind::Downsample,
            in_channels,
            out_channels,
            internal_channels: default_internal(out_channels),
        }
    }

    pub fn standard(channels: usize) -> Self {
        Self {
            kind: BlockKind::Standard,
            in_channels: channels,
            out_channels: channels,
            internal_channels: default_internal(channels),
        }
    }

    pub fn upsample(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: BlockKind::Upsample,
            in_channels,
            out_channels,
            internal_channels: default_internal(out_channels),
        }
    }

    pub fn last_conv(in_channels: usize, num_classes: usize) -> Self {
        Self {
            kind: BlockKind::LastConv,
            in_channels,
            out_channels: num_classes,
            internal_channels: num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (i, o, m) = (self.in_channels, self.out_channels, self.internal_channels);
        if i == 0 || o == 0 || m == 0 {
            return Err(Error::invalid(format!("{} block channel counts must be positive", self.kind.name())));
        }
        if m > o {
            return Err(Error::invalid(format!(
                "{} block internal width {m} exceeds output width {o}",
                self.kind.name()
            )));
        }
        match self.kind {
            BlockKind::Initial if o <= i => Err(Error::invalid(format!(
                "Initial block needs out_ch > in_ch (conv would have {} filters)",
                o as isize - i as isize
            ))),
            BlockKind::Standard if i != o => Err(Error::invalid(format!(
                "Standard block must preserve channels, got {i} -> {o}"
            ))),
            BlockKind::Downsample if o < i => Err(Error::invalid(format!(
                "Downsample block cannot shrink channels ({i} -> {o})"
            ))),
            _ => Ok(()),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        check_dim(self.kind.name(), "input channels", input.c, self.in_channels)?;
        let (num, den) = self.kind.scale();
        if den > 1 && (!input.h.is_multiple_of(den) || !input.w.is_multiple_of(den)) {
            return Err(Error::invalid(format!(
                "{} block needs even spatial dims, got {}x{}",
                self.kind.name(),
                input.h,
                input.w
            )));
        }
        Ok(Shape::new(input.n, self.out_channels, input.h * num / den, input.w * num / den))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Pruned,
}

impl Variant {
    /// Width of blocks 7–25's bottleneck stream.
    pub fn bottleneck_width(self) -> usize {
        match self {
            Variant::Full => 128,
            Variant::Pruned => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Pruned => "pruned",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "pruned" => Ok(Variant::Pruned),
            other => Err(Error::invalid(format!("unknown variant {other:?} (expected full or pruned)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub variant: Variant,
}

/// Index range (0-based) of the blocks that run at bottleneck width:
/// block 7 (Downsample) through block 24.
pub const BOTTLENECK_BLOCKS: std::ops::RangeInclusive<usize> = 6..=23;

impl NetworkSpec {
    /// The 30-block architecture: Initial; Downsample 16→64; 4× Standard 64;
    /// Downsample 64→C; 17× Standard C; Upsample C→64; 2× Standard 64;
    /// Upsample 64→16; Standard 16; LastConv 16→2, with C = 128 or 64.
    pub fn new(variant: Variant) -> Self {
        let c = variant.bottleneck_width();
        let mut blocks = vec![BlockSpec::initial(3, 16), BlockSpec::downsample(16, 64)];
        blocks.extend(std::iter::repeat_n(BlockSpec::standard(64), 4));
        blocks.push(BlockSpec::downsample(64, c));
        blocks.extend(std::iter::repeat_n(BlockSpec::standard(c), 17));
        blocks.push(BlockSpec::upsample(c, 64));
        blocks.extend(std::iter::repeat_n(BlockSpec::standard(64), 2));
        blocks.push(BlockSpec::upsample(64, 16));
        blocks.push(BlockSpec::standard(16));
        blocks.push(BlockSpec::last_conv(16, 2));
        Self {
            blocks,
            num_classes: 2,
            variant,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.in_channels)
    }

    /// H and W must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        let mut level = 1usize;
        let mut deepest = 1usize;
        for b in &self.blocks {
            let (num, den) = b.kind.scale();
            level = level * den / num.max(1);
            if den > 1 {
                deepest = deepest.max(level);
            }
            if num > 1 {
                level = (level / num).max(1);
            }
        }
        deepest
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("network has no blocks"));
        }
        for (i, pair) in self.blocks.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::invalid(format!(
                    "channel chain broken at block {}: block {} emits {} channels, block {} expects {}",
                    i + 2,
                    i + 1,
                    pair[0].out_channels,
                    i + 2,
                    pair[1].in_channels
                )));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate().map_err(|e| Error::invalid(format!("block {}: {e}", i + 1)))?;
        }
        let last = self.blocks.last().expect("non-empty");
        if last.out_channels != self.num_classes {
            return Err(Error::invalid(format!(
                "last block emits {} channels for {} classes",
                last.out_channels, self.num_classes
            )));
        }
        Ok(())
    }
}

/// One row of a shape trace. Block indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub block: usize,
    pub kind: BlockKind,
    pub input: Shape,
    pub output: Shape,
}

/// Per-block output shapes from the spec alone; no weights are touched.
pub fn shape_trace(spec: &NetworkSpec, input: Shape) -> Result<Vec<TraceRow>> {
    spec.validate()?;
    input.validate()?;
    let mut cur = input;
    let mut rows = Vec::with_capacity(spec.blocks.len());
    for (i, b) in spec.blocks.iter().enumerate() {
        let out = b
            .output_shape(cur)
            .map_err(|e| Error::invalid(format!("block {}: {e}", i + 1)))?;
        rows.push(TraceRow {
            block: i + 1,
            kind: b.kind,
            input: cur,
            output: out,
        });
        cur = out;
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub enum Shortcut<T: Scalar = f32> {
    /// LastConv has no second branch.
    None,
    Identity,
    /// Initial block: pooled input is concatenated after the conv output.
    Pool(Layer<T>),
    /// Downsample: max-pool, then zero channels appended up to `channels`.
    PoolPad { pool: Layer<T>, channels: usize },
    /// Upsample: 1×1 conv then nearest-neighbour 2×.
    Project(Sequential<T>),
}

#[derive(Debug, Clone)]
pub struct Block<T: Scalar = f32> {
    pub spec: BlockSpec,
    pub main: Sequential<T>,
    pub shortcut: Shortcut<T>,
    out_cache: Option<Tensor<T>>,
}

impl<T: Scalar> Block<T> {
    /// Zero-weighted block of the given spec; batchnorm starts at identity.
    pub fn from_spec(spec: BlockSpec) -> Result<Self> {
        spec.validate()?;
        let (i, o, m) = (spec.in_channels, spec.out_channels, spec.internal_channels);
        let (main, shortcut) = match spec.kind {
            BlockKind::Initial => (
                Sequential::new(vec![Layer::conv(ConvWeights::standard(o - i, i, 3, 2, 1)?)]),
                Shortcut::Pool(Layer::maxpool()),
            ),
            BlockKind::Standard | BlockKind::Downsample => {
                let stride = if spec.kind == BlockKind::Downsample { 2 } else { 1 };
                let main = Sequential::new(vec![
                    Layer::conv(ConvWeights::pointwise(m, i)?),
                    Layer::relu(),
                    Layer::conv(ConvWeights::depthwise(m, 3, stride, 1)?),
                    Layer::conv(ConvWeights::pointwise(o, m)?),
                    Layer::batchnorm(BatchNormParams::new(o)),
                ]);
                let shortcut = if stride == 2 {
                    Shortcut::PoolPad {
                        pool: Layer::maxpool(),
                        channels: o,
                    }
                } else {
                    Shortcut::Identity
                };
                (main, shortcut)
            }
            BlockKind::Upsample => (
                Sequential::new(vec![
                    Layer::conv(ConvWeights::pointwise(m, i)?),
                    Layer::relu(),
                    Layer::conv(ConvWeights::transposed(m, m, 3, 2, 1)?),
                    Layer::conv(ConvWeights::pointwise(o, m)?),
                    Layer::batchnorm(BatchNormParams::new(o)),
                ]),
                Shortcut::Project(Sequential::new(vec![
                    Layer::conv(ConvWeights::pointwise(o, i)?),
                    Layer::upsample(),
                ])),
            ),
            BlockKind::LastConv => (
                Sequential::new(vec![Layer::conv(ConvWeights::transposed(o, i, 3, 2, 1)?)]),
                Shortcut::None,
            ),
        };
        Ok(Self {
            spec,
            main,
            shortcut,
            out_cache: None,
        })
    }

    pub fn init_uniform<R: rand::Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut init = |seq: &mut Sequential<T>| {
            for l in &mut seq.layers {
                if let Some(w) = l.as_conv_mut() {
                    w.init_uniform(rng);
                }
            }
        };
        init(&mut self.main);
        if let Shortcut::Project(seq) = &mut self.shortcut {
            init(seq);
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.spec.output_shape(input)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.main.infer(x)?;
        match &self.shortcut {
            Shortcut::None => Ok(a),
            Shortcut::Pool(pool) => concat_channels(&a, &pool.infer(x)?),
            Shortcut::Identity => Ok(relu(&add_elementwise(&a, x)?)),
            Shortcut::PoolPad { pool, channels } => {
                let b = pad_channels(&pool.infer(x)?, *channels)?;
                Ok(relu(&add_elementwise(&a, &b)?))
            }
            Shortcut::Project(seq) => Ok(relu(&add_elementwise(&a, &seq.infer(x)?)?)),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            self.clear_cache();
            return self.infer(x);
        }
        let a = self.main.forward(x, mode)?;
        let out = match &mut self.shortcut {
            Shortcut::None => return Ok(a),
            Shortcut::Pool(pool) => return concat_channels(&a, &pool.forward(x, mode)?),
            Shortcut::Identity => relu(&add_elementwise(&a, x)?),
            Shortcut::PoolPad { pool, channels } => {
                let b = pad_channels(&pool.forward(x, mode)?, *channels)?;
                relu(&add_elementwise(&a, &b)?)
            }
            Shortcut::Project(seq) => relu(&add_elementwise(&a, &seq.forward(x, mode)?)?),
        };
        self.out_cache = Some(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match &mut self.shortcut {
            Shortcut::None => self.main.backward(grad),
            Shortcut::Pool(pool) => {
                let conv_channels = self.spec.out_channels - self.spec.in_channels;
                let (ga, gb) = split_channels(grad, conv_channels)?;
                let gx = self.main.backward(&ga)?;
                add_elementwise(&gx, &pool.backward(&gb)?)
            }
            shortcut => {
                let y = self.out_cache.take().ok_or(Error::NoForwardCache("residual block"))?;
                let g = relu_backward(&y, grad)?;
                let gx_main = self.main.backward(&g)?;
                let gx_short = match shortcut {
                    Shortcut::Identity => g,
                    Shortcut::PoolPad { pool, .. } => {
                        let in_c = self.spec.in_channels;
                        let gp = if g.shape().c > in_c { split_channels(&g, in_c)?.0 } else { g };
                        pool.backward(&gp)?
                    }
                    Shortcut::Project(seq) => seq.backward(&g)?,
                    Shortcut::None | Shortcut::Pool(_) => unreachable!("handled above"),
                };
                add_elementwise(&gx_main, &gx_short)
            }
        }
    }

    pub fn clear_cache(&mut self) {
        self.out_cache = None;
        self.main.clear_cache();
        match &mut self.shortcut {
            Shortcut::Pool(l) | Shortcut::PoolPad { pool: l, .. } => l.clear_cache(),
            Shortcut::Project(seq) => seq.clear_cache(),
            Shortcut::None | Shortcut::Identity => {}
        }
    }

    pub fn shortcut_layers(&self) -> &[Layer<T>] {
        match &self.shortcut {
            Shortcut::Project(seq) => &seq.layers,
            Shortcut::Pool(l) | Shortcut::PoolPad { pool: l, .. } => std::slice::from_ref(l),
            Shortcut::None | Shortcut::Identity => &[],
        }
    }

    pub fn shortcut_layers_mut(&mut self) -> &mut [Layer<T>] {
        match &mut self.shortcut {
            Shortcut::Project(seq) => &mut seq.layers,
            Shortcut::Pool(l) | Shortcut::PoolPad { pool: l, .. } => std::slice::from_mut(l),
            Shortcut::None | Shortcut::Identity => &mut [],
        }
    }

    pub fn param_count(&self) -> usize {
        self.main.param_count() + self.shortcut_layers().iter().map(Layer::param_count).sum::<usize>()
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        self.main.visit_params(f);
        if let Shortcut::Project(seq) = &mut self.shortcut {
            seq.visit_params(f);
        }
    }
}

pub fn build_initial_block<T: Scalar>(in_ch: usize, out_ch: usize) -> Result<Block<T>> {
    Block::from_spec(BlockSpec::initial(in_ch, out_ch))
}

/// `kind` must be Standard or Downsample.
pub fn build_factorized_block<T: Scalar>(
    kind: BlockKind,
    in_ch: usize,
    out_ch: usize,
    internal_ch: usize,
) -> Result<Block<T>> {
    if !matches!(kind, BlockKind::Standard | BlockKind::Downsample) {
        return Err(Error::invalid(format!("{} is not a factorized block kind", kind.name())));
    }
    Block::from_spec(BlockSpec {
        kind,
        in_channels: in_ch,
        out_channels: out_ch,
        internal_channels: internal_ch,
    })
}

pub fn build_upsample_block<T: Scalar>(in_ch: usize, out_ch: usize) -> Result<Block<T>> {
    if in_ch <= out_ch {
        return Err(Error::invalid(format!("Upsample block must reduce channels, got {in_ch} -> {out_ch}")));
    }
    Block::from_spec(BlockSpec::upsample(in_ch, out_ch))
}

pub fn build_lastconv<T: Scalar>(in_ch: usize, num_classes: usize) -> Result<Block<T>> {
    Block::from_spec(BlockSpec::last_conv(in_ch, num_classes))
}

/// Which branch of a block a layer lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Main,
    Shortcut,
}

/// Stable address of a layer: 0-based block index, branch, position.
/// Rendered as `b07.main.3` (block numbers 1-based in text form).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct LayerId {
    pub block: usize,
    pub branch: Branch,
    pub index: usize,
}

impl LayerId {
    pub const fn main(block: usize, index: usize) -> Self {
        Self {
            block,
            branch: Branch::Main,
            index,
        }
    }

    pub const fn shortcut(block: usize, index: usize) -> Self {
        Self {
            block,
            branch: Branch::Shortcut,
            index,
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let branch = match self.branch {
            Branch::Main => "main",
            Branch::Shortcut => "shortcut",
        };
        write!(f, "b{:02}.{}.{}", self.block + 1, branch, self.index)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed layer id {s:?}"));
        let mut parts = s.split('.');
        let block: usize = parts
            .next()
            .and_then(|p| p.strip_prefix('b'))
            .and_then(|p| p.parse().ok())
            .filter(|&b: &usize| b >= 1)
            .ok_or_else(bad)?;
        let branch = match parts.next() {
            Some("main") => Branch::Main,
            Some("shortcut") => Branch::Shortcut,
            _ => return Err(bad()),
        };
        let index = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self {
            block: block - 1,
            branch,
            index,
        })
    }
}

impl From<LayerId> for String {
    fn from(id: LayerId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for LayerId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub name: String,
    pub seed: u64,
    pub prune_history: Vec<String>,
}

/// A built, weighted encoder-decoder.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    pub spec: NetworkSpec,
    pub blocks: Vec<Block<T>>,
    pub meta: NetworkMeta,
}

/// Builds the architecture for `variant` with seeded uniform init.
pub fn build_network(variant: Variant, seed: u64) -> Network<f32> {
    Network::build(NetworkSpec::new(variant), seed).expect("built-in spec is valid")
}

impl<T: Scalar> Network<T> {
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        net.meta.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut net.blocks {
            b.init_uniform(&mut rng);
        }
        Ok(net)
    }

    /// All conv weights and biases zero, batchnorm at identity.
    pub fn zeroed(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let blocks = spec.blocks.iter().map(|&b| Block::from_spec(b)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            meta: NetworkMeta {
                name: format!("navseg-{}", spec.variant.name()),
                seed: 0,
                prune_history: Vec::new(),
            },
            spec,
            blocks,
        })
    }

    pub fn check_input(&self, input: Shape) -> Result<()> {
        check_dim("network input", "channels", input.c, self.spec.in_channels())?;
        let d = self.spec.required_divisor();
        if !input.h.is_multiple_of(d) || !input.w.is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "input height and width must be divisible by {d}, got {}x{}",
                input.h, input.w
            )));
        }
        Ok(())
    }

    /// Logits of shape `(N, num_classes, H, W)`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.infer(&y)?;
        }
        Ok(y)
    }

    /// Inference that also records every block's output shape.
    pub fn infer_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Shape>)> {
        self.check_input(x.shape())?;
        let mut y = x.clone();
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            y = b.infer(&y)?;
            shapes.push(y.shape());
        }
        Ok((y, shapes))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward(&y, mode)?;
        }
        Ok(y)
    }

    /// Backpropagates a logits gradient through the last training forward,
    /// accumulating into every parameter's gradient. Returns the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_logits.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.blocks.iter_mut().for_each(Block::clear_cache);
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    pub fn layer(&self, id: LayerId) -> Option<&Layer<T>> {
        let b = self.blocks.get(id.block)?;
        match id.branch {
            Branch::Main => b.main.layers.get(id.index),
            Branch::Shortcut => b.shortcut_layers().get(id.index),
        }
    }

    pub fn layer_mut(&mut self, id: LayerId) -> Option<&mut Layer<T>> {
        let b = self.blocks.get_mut(id.block)?;
        match id.branch {
            Branch::Main => b.main.layers.get_mut(id.index),
            Branch::Shortcut => b.shortcut_layers_mut().get_mut(id.index),
        }
    }

    /// Every layer with its id, main branch before shortcut, blocks in order.
    pub fn layers(&self) -> impl Iterator<Item = (LayerId, &Layer<T>)> {
        self.blocks.iter().enumerate().flat_map(|(bi, b)| {
            let main = b.main.layers.iter().enumerate().map(move |(i, l)| (LayerId::main(bi, i), l));
            let short = b
                .shortcut_layers()
                .iter()
                .enumerate()
                .map(move |(i, l)| (LayerId::shortcut(bi, i), l));
            main.chain(short)
        })
    }
}

impl<T: Scalar> Parameterized<T> for Network<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }
}
