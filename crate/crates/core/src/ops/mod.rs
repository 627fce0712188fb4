//! Forward and backward numerical kernels.
//!
//! Every kernel partitions its output into independent planes and accumulates
//! each output element in a fixed order, so results are bit-identical whether
//! or not planes are processed in parallel.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;

use std::sync::atomic::{AtomicBool, Ordering};

pub use conv::{
    conv2d, conv2d_backward, depthwise_conv2d, pointwise_conv2d, transposed_conv2d, ConvGrads, ConvKind,
    ConvWeights,
};
pub use elementwise::{
    add_elementwise, concat_channels, pad_channels, relu, relu_backward, softmax_channels, split_channels,
    upsample_nearest2x, upsample_nearest2x_backward,
};
pub use norm::{batchnorm, batchnorm_backward, batchnorm_infer, BatchNormCache, BatchNormParams, Mode};
pub use pool::{maxpool2d, maxpool2d_backward, maxpool2d_with_indices};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables intra-operation parallelism over output planes. Off by default.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `out`.
pub(crate) fn for_each_plane<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
