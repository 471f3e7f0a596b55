//! Live decision support: strategy probabilities and a recommended reply
//! for the latest help-seeker turn of a session.

use serde::{Deserialize, Serialize};

use crate::corpus::{Session, Strategy, Taxonomy};
use crate::generator::{prompt_strategies, GenerationInput, GeneratorError, GeneratorModel, PromptText};
use crate::hgt::{HgtModel, ThresholdSet};
use crate::lexicon::Lexicon;
use crate::session_graph::{point_subgraph, GraphAblation, GraphInputs, GraphMode, UtteranceEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub name: String,
    pub probability: f64,
    pub threshold: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub strategies: Vec<StrategyScore>,
    /// Strategies placed in the generator prompt.
    pub prompted: Vec<String>,
    pub response_text: String,
    pub soft_prompt_gate: Option<f64>,
}

/// The classifier, its thresholds and one generator, with the resources
/// needed to build graphs for live sessions.
#[derive(Clone, Debug)]
pub struct Recommender {
    pub lexicon: Lexicon,
    pub taxonomy: Taxonomy,
    pub encoder: UtteranceEncoder,
    pub classifier: HgtModel,
    pub thresholds: ThresholdSet,
    pub generator: GeneratorModel,
}

impl Recommender {
    fn inputs(&self) -> GraphInputs<'_> {
        GraphInputs {
            lexicon: &self.lexicon,
            taxonomy: &self.taxonomy,
            encoder: &self.encoder,
        }
    }

    /// Probabilities for the help-seeker turn at `seeker_index`, from the
    /// session truncated at that turn.
    pub fn classify(&self, session: &Session, seeker_index: usize) -> Result<[f64; 3], GeneratorError> {
        let point = point_subgraph(session, seeker_index, self.inputs(), GraphMode::Infer, self.classifier.config.ablation)?;
        Ok(self.classifier.predict(&point)?)
    }

    /// Classifies, then generates greedily with the prompted strategies.
    pub fn recommend(&self, session: &Session, seeker_index: usize) -> Result<Recommendation, GeneratorError> {
        let probs = self.classify(session, seeker_index)?;
        let selected = self.thresholds.apply(&probs);
        let prompted = prompt_strategies(probs, &self.thresholds);
        let mut input = GenerationInput {
            prompt: PromptText::for_point(session, seeker_index, &prompted, &self.taxonomy, self.generator.config.window)?,
            graph: point_subgraph(session, seeker_index, self.inputs(), GraphMode::Infer, GraphAblation::Full)?,
            context: None,
        };
        self.generator.prepare(std::iter::once(&mut input))?;
        let out = self.generator.generate(&input, None)?;
        Ok(Recommendation {
            strategies: Strategy::ALL
                .iter()
                .map(|&s| StrategyScore {
                    name: s.name().to_string(),
                    probability: probs[s.index()],
                    threshold: self.thresholds.0[s.index()],
                    selected: selected[s.index()],
                })
                .collect(),
            prompted: prompted.iter().map(|s| s.name().to_string()).collect(),
            response_text: out.text,
            soft_prompt_gate: out.gate,
        })
    }
}
