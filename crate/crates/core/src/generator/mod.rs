//! Strategy-conditioned response generation: a small decoder with
//! low-rank adapters, conditioned on graph-derived virtual tokens.

mod decoder;
mod graph_prompt;
mod model;
mod prompt;
mod tokenizer;
mod train;

pub use decoder::{AdapterConfig, Decoder, DecoderConfig, ADAPTER_GROUP, BASE_GROUP, VIRTUAL_TOKENS};
pub use graph_prompt::{context_vars, graph_context, GraphContext, SoftPromptConfig, SoftPromptHead, PROJECTOR_GROUP};
pub use model::{
    build_examples, prompt_strategies, Condition, ConditionPreset, GenerationExample, GenerationInput, Generated,
    GeneratorConfig, GeneratorModel, SamplingConfig, CHECKPOINT_KIND,
};
pub use prompt::{PromptText, PROMPT_FORMAT_VERSION, WINDOW};
pub use tokenizer::{Tokenizer, SPECIAL_TOKENS};
pub use train::{
    dialogue_chunks, pretrain_decoder, response_loss, train_generator, EarlyStopping, FineTuneConfig, FineTuneReport,
    PretrainConfig, PretrainReport,
};

pub mod special {
    pub use super::tokenizer::{CAREGIVER, DEFINITION, EOS, RESPONSE, SEEKER, STRATEGY};
}

use crate::hgt::HgtError;
use crate::numerics::NumericsError;
use crate::session_graph::GraphError;

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Hgt(#[from] HgtError),
    #[error("{tokens} tokens do not fit in a context of {context}")]
    ContextOverflow { tokens: usize, context: usize },
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
}
