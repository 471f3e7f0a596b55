use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::decoder::{ADAPTER_GROUP, VIRTUAL_TOKENS};
use super::graph_prompt::PROJECTOR_GROUP;
use super::model::{GenerationExample, GeneratorModel};
use super::tokenizer::{Tokenizer, CAREGIVER, EOS, SEEKER};
use super::GeneratorError;
use crate::corpus::{Session, Speaker};
use crate::numerics::{Graph, GroupHyper, Optimizer, OptimizerConfig, ParamStore, SeedStream, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adapter_learning_rate: f64,
    pub projector_learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 7,
            patience: 2,
            batch_size: 8,
            adapter_learning_rate: 5e-6,
            projector_learning_rate: 5e-2,
            weight_decay: 0.0,
            seed: 42,
        }
    }
}

/// Stops once the monitored loss has not improved for `patience`
/// consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epochs: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epochs: 0,
            stale: 0,
        }
    }

    /// Records one epoch's loss; returns true if it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epochs += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epochs;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.stale >= self.patience
    }

    /// 1-based epoch of the best loss (0 before any observation).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub sequences: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub epochs_run: usize,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub rejected_steps: usize,
}

/// Tagged token stream of whole dialogues, cut into `len`-token chunks.
pub fn dialogue_chunks(sessions: &[&Session], tokenizer: &Tokenizer, len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for s in sessions {
        let mut ids = Vec::new();
        for u in &s.utterances {
            ids.push(match u.speaker {
                Speaker::HelpSeeker => SEEKER,
                Speaker::Caregiver => CAREGIVER,
            });
            ids.extend(tokenizer.encode(&u.text.replace('\\', "\\\\").replace("<|", "<\\|")));
        }
        ids.push(EOS);
        out.extend(ids.chunks(len).filter(|c| c.len() >= 2).map(<[usize]>::to_vec));
    }
    out
}

fn mean_of(g: &Graph<f64>, losses: &[Var]) -> Result<Var, GeneratorError> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / losses.len() as f64))
}

/// Trains the base decoder as a plain language model on dialogue text.
pub fn pretrain_decoder(model: &mut GeneratorModel, sessions: &[&Session], cfg: &PretrainConfig) -> Result<PretrainReport, GeneratorError> {
    if model.decoder.adapters.is_some() || model.soft_prompt.is_some() {
        return Err(GeneratorError::Config("pre-training applies to a base decoder only".into()));
    }
    let len = model.config.decoder.context - VIRTUAL_TOKENS;
    let chunks = dialogue_chunks(sessions, &model.tokenizer, len);
    if chunks.is_empty() {
        return Err(GeneratorError::Invalid("no text to pre-train on".into()));
    }
    let seeds = SeedStream::new(cfg.seed).child("pretrain");
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.learning_rate, 0.0))?;
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut report = PretrainReport {
        sequences: chunks.len(),
        epoch_losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeds.keyed("shuffle", epoch as u64));
        let (mut sum, mut n) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let g = Graph::inference();
            let p = model.store.bind(&g);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let c = &chunks[i];
                let logits = model.decoder.logits(&g, &p, None, &c[..c.len() - 1])?;
                let targets: Vec<Option<usize>> = c[1..].iter().map(|&t| Some(t)).collect();
                losses.push(g.cross_entropy(logits, &targets)?);
            }
            let loss = mean_of(&g, &losses)?;
            sum += g.value(loss).item() * batch.len() as f64;
            n += batch.len();
            let grads = g.backward(loss)?.for_bound(&p);
            opt.step(&mut model.store, &grads)?;
        }
        report.epoch_losses.push(sum / n as f64);
    }
    Ok(report)
}

/// Mean response-token negative log-likelihood over `examples`.
pub fn response_loss(model: &GeneratorModel, examples: &[GenerationExample]) -> Result<f64, GeneratorError> {
    Ok(model.perplexity(examples)?.ln())
}

fn snapshot(model: &GeneratorModel) -> (ParamStore<f64>, Option<ParamStore<f64>>) {
    (model.store.clone(), model.graph_encoder.as_ref().map(|h| h.store.clone()))
}

fn restore(model: &mut GeneratorModel, snap: (ParamStore<f64>, Option<ParamStore<f64>>)) {
    model.store = snap.0;
    if let (Some(h), Some(s)) = (model.graph_encoder.as_mut(), snap.1) {
        h.store = s;
    }
}

/// Fine-tunes the adapters and soft-prompt head on gold responses with
/// AdamW, keeping the weights of the best validation epoch.
pub fn train_generator(
    model: &mut GeneratorModel,
    train: &[GenerationExample],
    val: &[GenerationExample],
    cfg: &FineTuneConfig,
) -> Result<FineTuneReport, GeneratorError> {
    if train.is_empty() {
        return Err(GeneratorError::Invalid("empty training set".into()));
    }
    if val.is_empty() {
        return Err(GeneratorError::Invalid("empty validation set".into()));
    }
    if !model.condition.preset().fine_tune {
        return Err(GeneratorError::Config(format!("{} has nothing to fine-tune", model.condition)));
    }
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    model.prepare(train.iter_mut().map(|e| &mut e.input))?;
    model.prepare(val.iter_mut().map(|e| &mut e.input))?;

    let projector = GroupHyper {
        learning_rate: cfg.projector_learning_rate,
        weight_decay: cfg.weight_decay,
    };
    let opt_cfg = OptimizerConfig::adamw(projector)
        .with_group(
            ADAPTER_GROUP,
            GroupHyper {
                learning_rate: cfg.adapter_learning_rate,
                weight_decay: cfg.weight_decay,
            },
        )
        .with_group(PROJECTOR_GROUP, projector);
    let mut opt = Optimizer::new(opt_cfg.clone())?;
    let mut encoder_opt = Optimizer::new(opt_cfg)?;
    let train_encoder = model.config.train_graph_encoder && model.graph_encoder.is_some();

    let seeds = SeedStream::new(cfg.seed).child("fine-tune");
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = snapshot(model);
    let mut report = FineTuneReport {
        epochs_run: 0,
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        best_epoch: 0,
        rejected_steps: 0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeds.keyed("shuffle", epoch as u64));
        let (mut sum, mut n) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let g = Graph::training(seeds.keyed("dropout", step));
            step += 1;
            let p = model.store.bind(&g);
            let eb = if train_encoder {
                model.graph_encoder.as_ref().map(|h| h.store.bind(&g))
            } else {
                None
            };
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                losses.push(model.example_loss(&g, &p, eb.as_ref(), &train[i])?.0);
            }
            let loss = mean_of(&g, &losses)?;
            sum += g.value(loss).item() * batch.len() as f64;
            n += batch.len();
            let grads = g.backward(loss)?;
            let r = opt.step(&mut model.store, &grads.for_bound(&p))?;
            if !r.rejected_groups.is_empty() {
                report.rejected_steps += 1;
            }
            if let (Some(eb), Some(h)) = (eb.as_ref(), model.graph_encoder.as_mut()) {
                encoder_opt.step(&mut h.store, &grads.for_bound(eb))?;
            }
        }
        report.train_losses.push(sum / n as f64);
        let v = response_loss(model, &val)?;
        report.val_losses.push(v);
        report.epochs_run = epoch + 1;
        if stopper.observe(v) {
            best = snapshot(model);
        }
        if stopper.should_stop() {
            break;
        }
    }
    report.best_epoch = stopper.best_epoch();
    restore(model, best);
    Ok(report)
}
