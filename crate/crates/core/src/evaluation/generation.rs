//! Per-point automatic metrics across generation conditions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::similarity::SimilarityScore;
use super::stats::{friedman, wilcoxon_holm, FriedmanResult, PairTest, WilcoxonMethod};
use super::EvalError;
use crate::generator::Condition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub point_id: String,
    pub gold: String,
    pub generated: BTreeMap<Condition, String>,
    pub similarity: BTreeMap<Condition, SimilarityScore>,
    pub token_nll: BTreeMap<Condition, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub similarity_f1: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub points: usize,
    /// Token-hashing similarity; an analog of contextual-embedding scores.
    pub similarity_metric: String,
    pub conditions: Vec<ConditionSummary>,
    pub friedman: Option<FriedmanResult<f64>>,
    pub pairwise: Vec<PairTest<f64>>,
}

/// Mean similarity and pooled perplexity per condition, a Friedman test on
/// per-point similarity F1, and Holm-corrected pairwise Wilcoxon tests.
pub fn summarize_generation(records: &[EvalRecord], conditions: &[Condition], alpha: f64) -> Result<GenerationSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Invalid("no evaluation records".into()));
    }
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::new();
    for &c in conditions {
        let mut f1 = Vec::with_capacity(records.len());
        let (mut nll, mut count) = (0.0, 0usize);
        for r in records {
            let s = r
                .similarity
                .get(&c)
                .ok_or_else(|| EvalError::Invalid(format!("record {} lacks {c}", r.point_id)))?;
            if !s.f1.is_finite() {
                return Err(EvalError::Invalid(format!("record {}: non-finite score", r.point_id)));
            }
            f1.push(s.f1);
            if let Some(t) = r.token_nll.get(&c) {
                nll += t.iter().sum::<f64>();
                count += t.len();
            }
        }
        out.push(ConditionSummary {
            condition: c,
            similarity_f1: f1.iter().sum::<f64>() / f1.len() as f64,
            perplexity: if count > 0 { (nll / count as f64).exp() } else { f64::NAN },
        });
        columns.push(f1);
    }
    let rows: Vec<Vec<f64>> = (0..records.len()).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    let friedman = if conditions.len() >= 3 && records.len() >= 2 { Some(friedman(&rows)?) } else { None };
    let mut pairs = Vec::new();
    for i in 0..conditions.len() {
        for j in i + 1..conditions.len() {
            pairs.push((format!("{} vs {}", conditions[i], conditions[j]), columns[i].clone(), columns[j].clone()));
        }
    }
    let pairwise = wilcoxon_holm(&pairs, alpha, WilcoxonMethod::Auto)?;
    Ok(GenerationSummary {
        points: records.len(),
        similarity_metric: "token-hashing similarity (desk-scale analog of contextual-embedding scoring)".into(),
        conditions: out,
        friedman,
        pairwise,
    })
}
