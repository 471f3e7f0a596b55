//! Heterogeneous session graph: utterance, conversation, lexicon-category
//! and distress-category nodes joined by typed, directed edges.

mod build;
mod encoder;
mod types;

pub use build::{
    batch, build_graph, conversation_features, conversation_width, point_subgraph, BatchedGraph, GraphInputs,
    PointGraph,
};
pub use encoder::{cosine, HashingEncoder, UtteranceEncoder, DEFAULT_ENCODER_WIDTH};
pub use types::{
    EdgeType, GraphAblation, GraphExport, GraphMode, GraphStats, HeteroGraph, MetaRelation, NodeType, UtteranceNode,
    META_RELATIONS,
};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("unknown distress label {0}")]
    UnknownDistress(String),
    #[error("unknown gender {0}")]
    UnknownGender(String),
    #[error("encoder: {0}")]
    Encoder(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("turn {index} of session {session} is not a help-seeker turn")]
    NotSeeker { session: String, index: usize },
}
