//! Lightweight encoder-decoder segmentation for ground navigation: tensor
//! kernels, network blocks, a convolution cost model, L1 filter pruning,
//! training, evaluation and model I/O.

pub mod blocks;
#[cfg(feature = "cli")]
pub mod cli;
pub mod costmodel;
pub mod dataio;
pub mod error;
pub mod layer;
pub mod ops;
pub mod optim;
pub mod pruner;
pub mod tensor;
pub mod trainer;

pub use blocks::{build_network, BlockKind, BlockSpec, LayerId, Network, NetworkSpec, Variant};
pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
