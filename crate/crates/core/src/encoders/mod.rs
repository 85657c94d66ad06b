//! Image and text transformers, caption/knowledge fusion, the matching head,
//! and momentum copies of the parameters.

mod config;
mod layers;
mod model;

pub use config::{EncoderConfig, FusionMode, Pooling};
pub use layers::{cross_attention, Attention, Block, LayerNorm, Linear};
pub use model::{
    momentum_update, patchify, Fusion, ImageFeatures, ImageTower, Layout, Model, TextFeatures,
    TextTower, TAU_INIT, TAU_RANGE,
};

use crate::tensor_ad::TensorError;

/// Default momentum coefficient for the soft-label copy.
pub const DEFAULT_MOMENTUM: f64 = 0.995;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
