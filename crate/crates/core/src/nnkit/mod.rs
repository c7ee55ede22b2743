//! Deterministic 64-bit numerical substrate: tensors, a reverse-mode tape,
//! layers, Adam and finite-difference gradient checking.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use layers::{
    AttnMask, Attention, Embedding, FeedForward, LayerNorm, Linear, TransformerBlock, TransformerStack, MASK_NEG,
};
pub use optim::{Adam, SchedulePoint};
pub use params::{Gradients, ParameterSet};
pub use tensor::Tensor;
pub(crate) use layers::uniform;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("gradient supplied for frozen parameter `{0}`")]
    FrozenParameter(String),
    #[error("non-finite gradient for `{0}`")]
    NonFinite(String),
    #[error("loss function is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
