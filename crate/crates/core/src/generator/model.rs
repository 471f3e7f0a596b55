use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{AdapterConfig, Decoder, DecoderConfig, ADAPTER_GROUP, BASE_GROUP, VIRTUAL_TOKENS};
use super::graph_prompt::{context_vars, graph_context, GraphContext, SoftPromptConfig, SoftPromptHead, PROJECTOR_GROUP};
use super::prompt::{PromptText, PROMPT_FORMAT_VERSION, WINDOW};
use super::tokenizer::{Tokenizer, EOS};
use super::GeneratorError;
use crate::corpus::{extract_intervention_points, Session, Strategy, Taxonomy};
use crate::hgt::{HgtConfig, HgtModel, ThresholdSet};
use crate::numerics::{Bound, Checkpoint, Graph, NumericsError, SeedStream, Tensor, Var};
use crate::session_graph::{point_subgraph, GraphAblation, GraphInputs, GraphMode, PointGraph};

pub const CHECKPOINT_KIND: &str = "generator";

/// Generation conditions, all sharing one code path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Pre-trained decoder, dialogue window only.
    Vanilla,
    /// Fine-tuned adapters, dialogue window only.
    #[serde(rename = "VanillaFT")]
    VanillaFt,
    /// Fine-tuned with the graph soft prompt, no strategy in the prompt.
    #[serde(rename = "GAFT")]
    GaFt,
    /// Soft prompt plus strategy tags and definitions.
    #[serde(rename = "SAGE")]
    Sage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionPreset {
    pub fine_tune: bool,
    pub soft_prompt: bool,
    pub strategy_prompt: bool,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Vanilla, Condition::VanillaFt, Condition::GaFt, Condition::Sage];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Vanilla => "Vanilla",
            Condition::VanillaFt => "VanillaFT",
            Condition::GaFt => "GAFT",
            Condition::Sage => "SAGE",
        }
    }

    pub fn preset(self) -> ConditionPreset {
        let (fine_tune, soft_prompt, strategy_prompt) = match self {
            Condition::Vanilla => (false, false, false),
            Condition::VanillaFt => (true, false, false),
            Condition::GaFt => (true, true, false),
            Condition::Sage => (true, true, true),
        };
        ConditionPreset {
            fine_tune,
            soft_prompt,
            strategy_prompt,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = GeneratorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| GeneratorError::Config(format!("unknown condition {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub decoder: DecoderConfig,
    pub adapters: AdapterConfig,
    pub soft_prompt: SoftPromptConfig,
    pub window: usize,
    pub max_new_tokens: usize,
    /// Train a private copy of the graph encoder instead of using the
    /// classifier's frozen one.
    pub train_graph_encoder: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            adapters: AdapterConfig::default(),
            soft_prompt: SoftPromptConfig::default(),
            window: WINDOW,
            max_new_tokens: 48,
            train_graph_encoder: false,
        }
    }
}

/// Everything the generator sees at one intervention point.
#[derive(Clone, Debug)]
pub struct GenerationInput {
    /// Prompt with strategies; conditions without strategy prompts drop them.
    pub prompt: PromptText,
    pub graph: PointGraph,
    pub context: Option<GraphContext>,
}

#[derive(Clone, Debug)]
pub struct GenerationExample {
    pub point_id: String,
    pub input: GenerationInput,
    pub response: String,
}

/// Strategies to put in the prompt: those at or above threshold ordered by
/// margin, or the single best margin when none is selected.
pub fn prompt_strategies(probs: [f64; 3], thresholds: &ThresholdSet) -> Vec<Strategy> {
    let mut margins: Vec<(f64, Strategy)> = Strategy::ALL.iter().map(|&s| (probs[s.index()] - thresholds.0[s.index()], s)).collect();
    margins.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.index().cmp(&b.1.index())));
    let selected: Vec<Strategy> = margins.iter().filter(|m| m.0 >= 0.0).map(|m| m.1).collect();
    if selected.is_empty() {
        vec![margins[0].1]
    } else {
        selected
    }
}

/// One example per intervention point, prompted with the gold strategies.
pub fn build_examples(
    sessions: &[&Session],
    taxonomy: &Taxonomy,
    inputs: GraphInputs<'_>,
    mode: GraphMode,
    window: usize,
) -> Result<Vec<GenerationExample>, GeneratorError> {
    let mut out = Vec::new();
    for s in sessions {
        let (points, _) = extract_intervention_points(s);
        for p in points {
            let strategies: Vec<Strategy> = p.targets.iter().collect();
            out.push(GenerationExample {
                point_id: p.id(),
                input: GenerationInput {
                    prompt: PromptText::for_point(s, p.seeker_index, &strategies, taxonomy, window)?,
                    graph: point_subgraph(s, p.seeker_index, inputs, mode, GraphAblation::Full)?,
                    context: None,
                },
                response: s.utterances[p.caregiver_index].text.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub seed: u64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub text: String,
    pub tokens: Vec<usize>,
    pub gate: Option<f64>,
}

/// Decoder, optional adapters and optional soft-prompt head for one
/// condition, plus the tokenizer and graph encoder they depend on.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub condition: Condition,
    pub tokenizer: Tokenizer,
    pub store: crate::numerics::ParamStore<f64>,
    pub decoder: Decoder,
    pub soft_prompt: Option<SoftPromptHead>,
    pub graph_encoder: Option<HgtModel>,
}

impl GeneratorModel {
    /// Untrained base decoder (the `Vanilla` condition).
    pub fn base(config: GeneratorConfig, tokenizer: Tokenizer) -> Result<Self, GeneratorError> {
        if tokenizer.vocab_size() > config.decoder.vocab_size {
            return Err(GeneratorError::Config(format!(
                "tokenizer has {} tokens but the decoder only {}",
                tokenizer.vocab_size(),
                config.decoder.vocab_size
            )));
        }
        if config.window == 0 || config.window > WINDOW {
            return Err(GeneratorError::Config(format!("window must be in 1..={WINDOW}")));
        }
        let mut store = crate::numerics::ParamStore::new();
        let decoder = Decoder::new(&mut store, config.decoder.clone())?;
        Ok(Self {
            config,
            condition: Condition::Vanilla,
            tokenizer,
            store,
            decoder,
            soft_prompt: None,
            graph_encoder: None,
        })
    }

    /// Derives a condition from a base model: base weights are frozen,
    /// adapters and the soft-prompt head are added as the preset requires.
    pub fn for_condition(base: &GeneratorModel, condition: Condition, graph_encoder: Option<&HgtModel>) -> Result<Self, GeneratorError> {
        if base.decoder.adapters.is_some() || base.soft_prompt.is_some() {
            return Err(GeneratorError::Config("expected a base decoder".into()));
        }
        let mut m = base.clone();
        m.condition = condition;
        m.store.freeze_all();
        let preset = condition.preset();
        if preset.fine_tune {
            m.decoder.apply_adapters(&mut m.store, m.config.adapters.clone())?;
        }
        if preset.soft_prompt {
            let hgt = graph_encoder.ok_or_else(|| GeneratorError::Config(format!("{condition} needs a graph encoder")))?;
            let mut hgt = hgt.clone();
            hgt.store.set_group_all(PROJECTOR_GROUP, m.config.train_graph_encoder);
            m.soft_prompt = Some(SoftPromptHead::new(
                &mut m.store,
                m.config.soft_prompt.clone(),
                hgt.config.hidden,
                m.config.decoder.width,
                m.config.decoder.seed,
            )?);
            m.graph_encoder = Some(hgt);
        }
        Ok(m)
    }

    pub fn gate(&self) -> Option<f64> {
        self.soft_prompt.as_ref().map(|h| self.store.get(h.gate).item())
    }

    pub fn set_gate(&mut self, value: f64) -> Result<(), GeneratorError> {
        let h = self.soft_prompt.as_ref().ok_or_else(|| GeneratorError::Config("no soft prompt".into()))?;
        self.store.set(h.gate, Tensor::scalar(value))?;
        Ok(())
    }

    /// Caches frozen graph-encoder states on each input.
    pub fn prepare(&self, inputs: impl IntoIterator<Item = impl std::borrow::BorrowMut<GenerationInput>>) -> Result<(), GeneratorError> {
        let Some(hgt) = self.frozen_encoder() else { return Ok(()) };
        for mut i in inputs {
            let i = i.borrow_mut();
            i.context = Some(graph_context(hgt, &i.graph)?);
        }
        Ok(())
    }

    fn frozen_encoder(&self) -> Option<&HgtModel> {
        self.graph_encoder.as_ref().filter(|_| !self.config.train_graph_encoder)
    }

    /// Prompt token ids for this condition, dropping the oldest window
    /// turns until `reserve` more tokens fit in the context.
    pub fn prompt_ids(&self, input: &GenerationInput, reserve: usize) -> Result<Vec<usize>, GeneratorError> {
        let mut prompt = input.prompt.clone();
        if !self.condition.preset().strategy_prompt {
            prompt.strategies.clear();
        } else if prompt.strategies.is_empty() {
            return Err(GeneratorError::Invalid(format!("{} needs at least one strategy", self.condition)));
        }
        let budget = self.config.decoder.context - VIRTUAL_TOKENS;
        loop {
            let ids = prompt.encode(&self.tokenizer);
            if ids.len() + reserve <= budget {
                return Ok(ids);
            }
            if prompt.window.len() <= 1 {
                return Err(GeneratorError::ContextOverflow {
                    tokens: ids.len() + reserve,
                    context: budget,
                });
            }
            prompt.window.remove(0);
        }
    }

    /// Gated virtual tokens, or `None` for conditions without a soft prompt.
    pub fn virtual_tokens(&self, g: &Graph<f64>, p: &Bound, encoder: Option<&Bound>, input: &GenerationInput) -> Result<Option<Var>, GeneratorError> {
        let Some(head) = &self.soft_prompt else { return Ok(None) };
        let hgt = self.graph_encoder.as_ref().expect("soft prompt has an encoder");
        let (q, nodes) = match (&input.context, encoder) {
            (Some(c), None) if !self.config.train_graph_encoder => (g.constant(c.query.clone()), g.constant(c.nodes.clone())),
            (_, Some(eb)) => {
                let states = hgt.forward(g, eb, &input.graph.graph)?;
                context_vars(g, &states, &input.graph)?
            }
            (None, None) => {
                let c = graph_context(hgt, &input.graph)?;
                (g.constant(c.query), g.constant(c.nodes))
            }
            (Some(_), None) => {
                return Err(GeneratorError::Invalid("trainable graph encoder needs bound parameters".into()));
            }
        };
        Ok(Some(head.soft_prompt(g, p, q, nodes)?))
    }

    /// Prompt ids and target ids (response plus end marker).
    pub fn example_ids(&self, ex: &GenerationExample) -> Result<(Vec<usize>, Vec<usize>), GeneratorError> {
        let mut target = self.tokenizer.encode(&ex.response);
        target.push(EOS);
        let prompt = self.prompt_ids(&ex.input, target.len())?;
        Ok((prompt, target))
    }

    /// Mean next-token cross-entropy over the response tokens, and the
    /// number of those tokens.
    pub fn example_loss(&self, g: &Graph<f64>, p: &Bound, encoder: Option<&Bound>, ex: &GenerationExample) -> Result<(Var, usize), GeneratorError> {
        let (prompt, target) = self.example_ids(ex)?;
        let mut ids = prompt.clone();
        ids.extend_from_slice(&target[..target.len() - 1]);
        let mut targets = vec![None; prompt.len() - 1];
        targets.extend(target.iter().map(|&t| Some(t)));
        let v = self.virtual_tokens(g, p, encoder, &ex.input)?;
        let logits = self.decoder.logits(g, p, v, &ids)?;
        Ok((g.cross_entropy(logits, &targets)?, target.len()))
    }

    /// Negative log-likelihood of each response token (end marker included).
    pub fn token_nll(&self, ex: &GenerationExample) -> Result<Vec<f64>, GeneratorError> {
        let (prompt, target) = self.example_ids(ex)?;
        let mut ids = prompt.clone();
        ids.extend_from_slice(&target[..target.len() - 1]);
        let g = Graph::inference();
        let p = self.store.bind(&g);
        let v = self.virtual_tokens(&g, &p, None, &ex.input)?;
        let logits = g.value(self.decoder.logits(&g, &p, v, &ids)?);
        Ok(target
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let row = logits.row(prompt.len() - 1 + j);
                log_sum_exp(row) - row[t]
            })
            .collect())
    }

    /// `exp` of the mean response-token negative log-likelihood.
    pub fn perplexity(&self, examples: &[GenerationExample]) -> Result<f64, GeneratorError> {
        if examples.is_empty() {
            return Err(GeneratorError::Invalid("perplexity of an empty set".into()));
        }
        let (mut total, mut count) = (0.0, 0usize);
        for ex in examples {
            let nll = self.token_nll(ex)?;
            total += nll.iter().sum::<f64>();
            count += nll.len();
        }
        Ok((total / count as f64).exp())
    }

    /// Decodes a response: greedy unless `sampling` is given.
    pub fn generate(&self, input: &GenerationInput, sampling: Option<&SamplingConfig>) -> Result<Generated, GeneratorError> {
        let max_new = self.config.max_new_tokens;
        let mut ids = self.prompt_ids(input, 1)?;
        let budget = self.config.decoder.context - VIRTUAL_TOKENS;
        let mut rng = sampling.map(|s| SeedStream::new(s.seed).keyed("sample", 0));
        let g = Graph::inference();
        let p = self.store.bind(&g);
        let v = self.virtual_tokens(&g, &p, None, input)?.map(|v| g.value(v));
        let mut out = Vec::new();
        while out.len() < max_new && ids.len() < budget {
            let g = Graph::inference();
            let p = self.store.bind(&g);
            let vt = v.as_ref().map(|t| g.constant_shared(t.clone()));
            let logits = g.value(self.decoder.logits(&g, &p, vt, &ids)?);
            let row = logits.row(ids.len() - 1);
            let next = match (sampling, rng.as_mut()) {
                (Some(s), Some(r)) => sample(&row[..self.tokenizer.vocab_size()], s.temperature, r)?,
                _ => argmax(&row[..self.tokenizer.vocab_size()]),
            };
            if next == EOS {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(Generated {
            text: self.tokenizer.decode(&out),
            tokens: out,
            gate: self.gate(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, GeneratorError> {
        let json = |e: serde_json::Error| GeneratorError::Config(e.to_string());
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "generator": serde_json::to_value(&self.config).map_err(json)?,
                "condition": self.condition,
                "prompt_format_version": PROMPT_FORMAT_VERSION,
                "graph_encoder": self.graph_encoder.as_ref().map(|h| serde_json::to_value(&h.config)).transpose().map_err(json)?,
            }),
        );
        ck.add_store("", &self.store);
        if let Some(h) = &self.graph_encoder {
            ck.add_store("graph_encoder.", &h.store);
        }
        ck.extra = serde_json::json!({ "tokenizer": self.tokenizer.serialize() });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GeneratorError> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(NumericsError::Checkpoint(format!("expected {CHECKPOINT_KIND}, found {}", ck.kind)).into());
        }
        let json = |e: serde_json::Error| GeneratorError::Config(format!("checkpoint config: {e}"));
        if ck.config["prompt_format_version"] != PROMPT_FORMAT_VERSION {
            return Err(GeneratorError::Config("unsupported prompt format version".into()));
        }
        let config: GeneratorConfig = serde_json::from_value(ck.config["generator"].clone()).map_err(json)?;
        let condition: Condition = serde_json::from_value(ck.config["condition"].clone()).map_err(json)?;
        let hgt_config: Option<HgtConfig> = serde_json::from_value(ck.config["graph_encoder"].clone()).map_err(json)?;
        let tok = ck.extra["tokenizer"]
            .as_str()
            .ok_or_else(|| GeneratorError::Config("checkpoint has no tokenizer".into()))?;
        let tokenizer = Tokenizer::deserialize(tok)?;
        let base = Self::base(config, tokenizer)?;
        let hgt = match hgt_config {
            Some(c) => {
                let mut h = HgtModel::new(c)?;
                ck.load_store("graph_encoder.", &mut h.store)?;
                Some(h)
            }
            None => None,
        };
        let mut m = if condition == Condition::Vanilla {
            base
        } else {
            Self::for_condition(&base, condition, hgt.as_ref())?
        };
        ck.load_store("", &mut m.store)?;
        Ok(m)
    }

    /// Parameter groups with at least one trainable entry.
    pub fn trainable_groups(&self) -> Vec<&str> {
        let mut g: Vec<&str> = self.store.entries().iter().filter(|e| e.trainable).map(|e| e.group.as_str()).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// Trainable parameter count added by the adapters.
    pub fn adapter_parameter_count(&self) -> usize {
        self.store.entries().iter().filter(|e| e.group == ADAPTER_GROUP).map(|e| e.value.numel()).sum()
    }

    pub fn base_parameter_count(&self) -> usize {
        self.store.entries().iter().filter(|e| e.group == BASE_GROUP).map(|e| e.value.numel()).sum()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f64], temperature: f64, rng: &mut impl Rng) -> Result<usize, GeneratorError> {
    if !(temperature > 0.0) {
        return Err(GeneratorError::Config("temperature must be positive".into()));
    }
    let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
    let lse = log_sum_exp(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &s) in scaled.iter().enumerate() {
        acc += (s - lse).exp();
        if u < acc {
            return Ok(i);
        }
    }
    Ok(row.len() - 1)
}
