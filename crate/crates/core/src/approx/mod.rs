//! Dense networks with hand-written backpropagation, the monotonic mixer and Adam.

mod adam;
mod dense;
mod mixer;

pub use adam::{clip_global_norm, AdamState};
pub use dense::{Activation, DenseNet, ForwardCache, LayerShape};
pub use mixer::{combine_with, mixer_combine, MixerCache, MixerGrads, MixerParams};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApproxError {
    #[error("expected {expected} values, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("forward cache does not belong to this network")]
    CacheMismatch,
    #[error("gradient entry {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

/// One-hot encoding of `index` in `dim` slots.
pub fn one_hot(index: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    v
}
