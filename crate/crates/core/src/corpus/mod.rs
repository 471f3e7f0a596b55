//! Dialogue data model, intervention points, splitting and the synthetic
//! corpus generator.

mod model;
mod points;
mod split;
mod synthetic;
mod taxonomy;

pub use model::{
    load_corpus, normalized_position, read_jsonl, save_corpus, validate_metadata, write_jsonl, Label, Session,
    Speaker, Strategy, StrategySet, Utterance, MAX_AGE, MIN_AGE,
};
pub use points::{extract_all, extract_intervention_points, ExtractionReport, InterventionPoint};
pub use split::{split_corpus, Split, DEFAULT_RATIOS};
pub use synthetic::{caregiver_template, generate_synthetic_corpus, PolicyConfig, SyntheticConfig};
pub use taxonomy::{StrategyDefinition, Taxonomy, BUNDLED_TAXONOMY};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error("unknown strategy {0}")]
    UnknownStrategy(String),
    #[error("unknown distress label {0}")]
    UnknownDistress(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
}
