use std::path::{Path, PathBuf};

use counsel_core::corpus::{SyntheticConfig, Taxonomy, DEFAULT_RATIOS};
use counsel_core::generator::{
    AdapterConfig, Condition, DecoderConfig, FineTuneConfig, GeneratorConfig, PretrainConfig, SoftPromptConfig,
};
use counsel_core::hgt::{HgtConfig, TrainConfig};
use counsel_core::lexicon::Lexicon;
use counsel_core::session_graph::{conversation_width, HashingEncoder};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const PIPELINE_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    /// Times each strategy definition is added to the tokenizer corpus so
    /// prompt text tokenizes compactly.
    pub definition_repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseConfig {
    pub focus: Condition,
    pub baseline: Condition,
    pub repeat_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub split: SplitPart,
    /// Cap on evaluated intervention points, taken in corpus order.
    pub max_points: Option<usize>,
    /// Points used for the strategy-swap and zero-gate checks.
    pub check_points: usize,
    pub alpha: f64,
    pub pairwise: PairwiseConfig,
}

/// Every setting of the pipeline. `seed` is authoritative: resolving the
/// config copies it into each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    pub corpus: SyntheticConfig,
    pub split_ratios: [f64; 3],
    pub encoder: HashingEncoder,
    pub classifier: HgtConfig,
    pub classifier_training: TrainConfig,
    pub tokenizer: TokenizerConfig,
    pub generator: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FineTuneConfig,
    pub conditions: Vec<Condition>,
    pub evaluation: EvaluationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: PIPELINE_CONFIG_VERSION,
            seed: 42,
            lexicon: None,
            taxonomy: None,
            corpus: SyntheticConfig {
                sessions: 80,
                mean_turns: 24,
                turn_spread: 6,
                ..Default::default()
            },
            split_ratios: DEFAULT_RATIOS,
            encoder: HashingEncoder::new(256, 0),
            classifier: HgtConfig {
                hidden: 32,
                ..Default::default()
            },
            classifier_training: TrainConfig {
                epochs: 20,
                patience: 5,
                ..Default::default()
            },
            tokenizer: TokenizerConfig {
                vocab_size: 512,
                definition_repeats: 100,
            },
            generator: GeneratorConfig {
                decoder: DecoderConfig {
                    width: 32,
                    layers: 2,
                    heads: 4,
                    context: 384,
                    ..Default::default()
                },
                adapters: AdapterConfig {
                    rank: 8,
                    alpha: 16.0,
                    dropout: 0.1,
                },
                soft_prompt: SoftPromptConfig {
                    projector_hidden: 64,
                    ..Default::default()
                },
                max_new_tokens: 24,
                ..Default::default()
            },
            pretrain: PretrainConfig::default(),
            finetune: FineTuneConfig {
                adapter_learning_rate: 1e-2,
                ..Default::default()
            },
            conditions: Condition::ALL.to_vec(),
            evaluation: EvaluationConfig {
                split: SplitPart::Test,
                max_points: Some(80),
                check_points: 40,
                alpha: 0.05,
                pairwise: PairwiseConfig {
                    focus: Condition::Sage,
                    baseline: Condition::VanillaFt,
                    repeat_fraction: 0.1,
                },
            },
        }
    }
}

impl PipelineConfig {
    /// A seconds-long configuration for smoke tests.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.corpus.sessions = 16;
        c.corpus.mean_turns = 12;
        c.corpus.turn_spread = 2;
        c.encoder.width = 32;
        c.classifier.hidden = 8;
        c.classifier.category_width = 8;
        c.classifier.heads = 2;
        c.classifier.layers = 1;
        c.classifier_training.epochs = 2;
        c.tokenizer.definition_repeats = 5;
        c.generator.decoder.width = 16;
        c.generator.decoder.layers = 1;
        c.generator.decoder.heads = 2;
        c.generator.decoder.context = 512;
        c.generator.adapters.rank = 4;
        c.generator.soft_prompt.heads = 2;
        c.generator.soft_prompt.projector_hidden = 16;
        c.generator.max_new_tokens = 8;
        c.pretrain.epochs = 1;
        c.finetune.epochs = 1;
        c.evaluation.max_points = Some(12);
        c.evaluation.check_points = 4;
        c
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let c: Self = serde_json::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if c.version != PIPELINE_CONFIG_VERSION {
            return Err(CliError::Config(format!("config version {} is not {PIPELINE_CONFIG_VERSION}", c.version)));
        }
        Ok(c)
    }

    pub fn resources(&self) -> Result<(Lexicon, Taxonomy), CliError> {
        let lexicon = match &self.lexicon {
            Some(p) => Lexicon::load(p).map_err(|e| CliError::Config(e.to_string()))?,
            None => Lexicon::bundled(),
        };
        let taxonomy = match &self.taxonomy {
            Some(p) => Taxonomy::load(p).map_err(|e| CliError::Config(e.to_string()))?,
            None => Taxonomy::bundled(),
        };
        Ok((lexicon, taxonomy))
    }

    /// Fills derived widths and per-stage seeds and checks cross-stage
    /// consistency.
    pub fn resolve(mut self, lexicon: &Lexicon, taxonomy: &Taxonomy) -> Result<Self, CliError> {
        self.classifier.utterance_input = self.encoder.width + 1;
        self.classifier.conversation_input = conversation_width(taxonomy);
        self.classifier.lexicon_categories = lexicon.len();
        self.classifier.distress_categories = taxonomy.distress_catalogue.len();
        self.classifier.seed = self.seed;
        self.classifier_training.seed = self.seed;
        self.generator.decoder.vocab_size = self.tokenizer.vocab_size;
        self.generator.decoder.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        if self.conditions.is_empty() {
            return Err(CliError::Config("no generation conditions".into()));
        }
        let mut seen = self.conditions.clone();
        seen.sort_by_key(|c| c.name());
        seen.dedup();
        if seen.len() != self.conditions.len() {
            return Err(CliError::Config("duplicate generation condition".into()));
        }
        let p = &self.evaluation.pairwise;
        for c in [p.focus, p.baseline] {
            if !self.conditions.contains(&c) {
                return Err(CliError::Config(format!("pairwise condition {c} is not among the evaluated conditions")));
            }
        }
        if self.encoder.width == 0 {
            return Err(CliError::Config("encoder width must be positive".into()));
        }
        Ok(self)
    }
}
