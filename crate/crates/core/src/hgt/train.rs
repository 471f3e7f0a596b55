use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::macro_f1;
use super::{HgtError, HgtModel, ThresholdSet};
use crate::corpus::{extract_intervention_points, InterventionPoint, Session};
use crate::numerics::{Graph, Optimizer, OptimizerConfig, SeedStream, Tensor};
use crate::session_graph::{batch, point_subgraph, GraphAblation, GraphInputs, GraphMode, PointGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            seed: 42,
        }
    }
}

/// A truncated point subgraph with its multi-label target.
#[derive(Clone, Debug)]
pub struct LabeledPoint {
    pub point: InterventionPoint,
    pub graph: PointGraph,
    pub labels: [bool; 3],
}

/// Point subgraphs for every intervention point of `sessions`.
pub fn build_points(
    sessions: &[&Session],
    inputs: GraphInputs<'_>,
    mode: GraphMode,
    ablation: GraphAblation,
) -> Result<Vec<LabeledPoint>, HgtError> {
    let mut out = Vec::new();
    for s in sessions {
        let (points, _) = extract_intervention_points(s);
        for p in points {
            let graph = point_subgraph(s, p.seeker_index, inputs, mode, ablation)?;
            out.push(LabeledPoint {
                labels: p.targets.0,
                point: p,
                graph,
            });
        }
    }
    Ok(out)
}

/// `(N − n⁺)/n⁺` per label.
pub fn positive_weights(labels: &[[bool; 3]]) -> Result<[f64; 3], HgtError> {
    let n = labels.len() as f64;
    let mut w = [0.0; 3];
    for (j, s) in crate::corpus::Strategy::ALL.iter().enumerate() {
        let pos = labels.iter().filter(|y| y[j]).count() as f64;
        if pos == 0.0 {
            return Err(HgtError::MissingStrategy(s.name().to_string()));
        }
        w[j] = (n - pos) / pos;
    }
    Ok(w)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub val_macro_f1: Vec<f64>,
    pub best_epoch: usize,
    pub positive_weights: [f64; 3],
}

pub fn predict_points(model: &HgtModel, points: &[LabeledPoint], batch_size: usize) -> Result<Vec<[f64; 3]>, HgtError> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(batch_size.max(1)) {
        let refs: Vec<&PointGraph> = chunk.iter().map(|p| &p.graph).collect();
        out.extend(model.predict_batch(&refs)?);
    }
    Ok(out)
}

/// Trains `model` in place with weighted BCE and keeps the weights with the
/// best validation macro-F1 at uniform 0.5 thresholds.
pub fn train_classifier(
    model: &mut HgtModel,
    train: &[LabeledPoint],
    val: &[LabeledPoint],
    config: &TrainConfig,
) -> Result<TrainReport, HgtError> {
    if train.is_empty() {
        return Err(HgtError::Invalid("empty training set".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(HgtError::Invalid("batch_size and epochs must be positive".into()));
    }
    let labels: Vec<[bool; 3]> = train.iter().map(|p| p.labels).collect();
    let pos_weight = positive_weights(&labels)?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.learning_rate, config.weight_decay))?;
    let seeds = SeedStream::new(config.seed).child("hgt-train");
    let val_labels: Vec<[bool; 3]> = val.iter().map(|p| p.labels).collect();

    let mut report = TrainReport {
        positive_weights: pos_weight,
        ..Default::default()
    };
    let mut best: Option<(f64, crate::numerics::ParamStore<f64>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut seeds.keyed("shuffle", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let parts: Vec<&PointGraph> = chunk.iter().map(|&i| &train[i].graph).collect();
            let batched = batch(&parts);
            let targets = Tensor::new(
                vec![chunk.len(), 3],
                chunk
                    .iter()
                    .flat_map(|&i| train[i].labels.map(|b| if b { 1.0 } else { 0.0 }))
                    .collect(),
            )?;
            let g = Graph::training(seeds.keyed("dropout", step));
            step += 1;
            let p = model.store.bind(&g);
            let logits = model.logits(&g, &p, &batched)?;
            let loss = g.bce_with_logits(logits, &targets, &pos_weight)?;
            total += g.value(loss).item() * chunk.len() as f64;
            let grads = g.backward(loss)?.for_bound(&p);
            let r = opt.step(&mut model.store, &grads)?;
            if !r.rejected_groups.is_empty() {
                return Err(HgtError::Invalid(format!("non-finite gradient at step {step}")));
            }
        }
        report.epoch_losses.push(total / train.len() as f64);
        report.epochs_run = epoch + 1;

        let score = if val.is_empty() {
            f64::NAN
        } else {
            let probs = predict_points(model, val, config.batch_size)?;
            macro_f1(&ThresholdSet::default().apply_all(&probs), &val_labels)
        };
        report.val_macro_f1.push(score);
        let improved = match &best {
            None => true,
            Some((b, _)) => score > *b,
        };
        if improved || val.is_empty() {
            best = Some((score, model.store.clone()));
            report.best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(report)
}
