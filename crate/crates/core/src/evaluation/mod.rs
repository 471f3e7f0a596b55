//! Automatic generation metrics, the statistical test battery and the blind
//! pairwise-comparison harness.

mod generation;
mod pairwise;
mod similarity;
pub mod stats;

pub use generation::{summarize_generation, ConditionSummary, EvalRecord, GenerationSummary};
pub use pairwise::{
    analyze_judgments, build_pairwise_tasks, flow_bin, Assignment, AssignmentMap, Criterion, CriterionRates, FlowBin,
    HistoryTurn, Judgment, JudgmentReport, Outcome, PairwiseBundle, PairwiseSource, PairwiseTask, Verdict, FLOW_BINS,
};
pub use similarity::{embedding_similarity, tokens, SimilarityScore};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    Invalid(String),
    #[error("undefined statistic: {0}")]
    Undefined(String),
    #[error("duplicate judgment for task {0}")]
    Duplicate(String),
}
