use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Strategy};

pub const BUNDLED_TAXONOMY: &str = include_str!("../../data/taxonomy.json");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyDefinition {
    pub name: String,
    pub definition: String,
}

/// Versioned label configuration: strategy names and definitions, the
/// distress catalogue and the gender categories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub version: String,
    pub strategies: Vec<StrategyDefinition>,
    pub neutral_label: String,
    pub genders: Vec<String>,
    pub distress_catalogue: Vec<String>,
}

impl Taxonomy {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn from_json(raw: &str) -> Result<Self, CorpusError> {
        let t: Self = serde_json::from_str(raw).map_err(|e| CorpusError::Invalid(format!("taxonomy: {e}")))?;
        for s in &t.strategies {
            s.name.parse::<Strategy>()?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &t.distress_catalogue {
            if !seen.insert(d) {
                return Err(CorpusError::Invalid(format!("duplicate distress item {d}")));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Definition text for a strategy; empty when not configured.
    pub fn definition(&self, s: Strategy) -> &str {
        self.strategies
            .iter()
            .find(|d| d.name == s.name())
            .map_or("", |d| d.definition.as_str())
    }

    pub fn distress_index(&self, label: &str) -> Option<usize> {
        self.distress_catalogue.iter().position(|d| d == label)
    }

    pub fn gender_index(&self, g: &str) -> Option<usize> {
        self.genders.iter().position(|x| x == g)
    }
}
