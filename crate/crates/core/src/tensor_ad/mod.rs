//! Dense tensors, reverse-mode differentiation, and the optimizer used to
//! train the encoders.

pub mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{softmax_rows, Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected a one-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0} needs at least one input")]
    Empty(&'static str),
    #[error("parameter {0} missing from checkpoint")]
    MissingParameter(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_similarity<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
    a.l2_normalize_rows().matmul_t(b.l2_normalize_rows())
}
