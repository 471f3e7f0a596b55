use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::session_graph::{cosine, HashingEncoder};

/// Token-matching similarity between a candidate and a reference text.
/// Token embeddings come from the hashing encoder, so this is a desk-scale
/// analog of contextual-embedding metrics rather than a replacement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn greedy(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / from.len() as f64
}

/// Precision is the mean best cosine of each candidate token against the
/// reference tokens; recall is the same in the other direction.
pub fn embedding_similarity(candidate: &str, reference: &str, encoder: &HashingEncoder) -> Result<SimilarityScore, EvalError> {
    let c: Vec<Vec<f64>> = tokens(candidate).iter().map(|t| encoder.encode(t)).collect();
    let r: Vec<Vec<f64>> = tokens(reference).iter().map(|t| encoder.encode(t)).collect();
    if c.is_empty() || r.is_empty() {
        return Err(EvalError::Invalid("similarity of an empty text".into()));
    }
    let precision = greedy(&c, &r);
    let recall = greedy(&r, &c);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(SimilarityScore { precision, recall, f1 })
}
