use serde::{Deserialize, Serialize};

use super::metrics::macro_f1;
use super::HgtError;

/// Per-strategy decision thresholds; a label is predicted when its
/// probability is at least its threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet(pub [f64; 3]);

impl Default for ThresholdSet {
    fn default() -> Self {
        Self([0.5; 3])
    }
}

impl ThresholdSet {
    pub fn apply(&self, probs: &[f64; 3]) -> [bool; 3] {
        [probs[0] >= self.0[0], probs[1] >= self.0[1], probs[2] >= self.0[2]]
    }

    pub fn apply_all(&self, probs: &[[f64; 3]]) -> Vec<[bool; 3]> {
        probs.iter().map(|p| self.apply(p)).collect()
    }
}

/// The grid {0.05, 0.06, …, 0.95}.
pub fn threshold_grid() -> Vec<f64> {
    (5..=95).map(|k| k as f64 / 100.0).collect()
}

/// Coordinate-wise grid search in label order maximizing macro-F1; ties go
/// to the threshold closest to 0.5, then the lower one.
pub fn calibrate_thresholds(probs: &[[f64; 3]], labels: &[[bool; 3]]) -> Result<ThresholdSet, HgtError> {
    if probs.is_empty() {
        return Err(HgtError::Invalid("empty validation set".into()));
    }
    if probs.len() != labels.len() {
        return Err(HgtError::Invalid("probabilities and labels differ in length".into()));
    }
    let mut current = ThresholdSet::default();
    let grid = threshold_grid();
    for j in 0..3 {
        let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
        for &t in &grid {
            let mut trial = current;
            trial.0[j] = t;
            let score = macro_f1(&trial.apply_all(probs), labels);
            let better = score > best.0
                || (score == best.0 && {
                    let (dt, db) = ((t - 0.5).abs(), (best.1 - 0.5).abs());
                    dt < db - 1e-12 || ((dt - db).abs() <= 1e-12 && t < best.1)
                });
            if better {
                best = (score, t);
            }
        }
        current.0[j] = best.1;
    }
    Ok(current)
}
