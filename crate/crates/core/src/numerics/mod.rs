//! Dense tensors, reverse-mode differentiation, layers and optimizers.
//!
//! Everything here is generic over [`Scalar`] (`f32`/`f64`); the models in
//! this crate instantiate it at `f64`.

mod autodiff;
mod checkpoint;
pub mod gradcheck;
mod layers;
mod optim;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use autodiff::{Gradients, Graph, Unary, Var};
pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_FORMAT_VERSION};
pub use layers::{causal_mask, head_width, multi_head_attention, Embedding, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{GroupHyper, Optimizer, OptimizerConfig, OptimizerKind, StepReport};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
pub use rng::{splitmix, stable_hash, SeedStream};
pub use scalar::Scalar;
pub use tensor::Tensor;


#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("head count {heads} does not divide width {width}")]
    HeadsDoNotDivide { width: usize, heads: usize },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
