use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Taxonomy};

/// The three intervention strategies, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    Reflection,
    Exploration,
    Suggestion,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Reflection, Strategy::Exploration, Strategy::Suggestion];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Reflection => "Reflection",
            Strategy::Exploration => "Exploration",
            Strategy::Suggestion => "Suggestion",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| CorpusError::UnknownStrategy(s.to_string()))
    }
}

/// Annotation on a caregiver turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Reflection,
    Exploration,
    Suggestion,
    Neutral,
}

impl Label {
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Label::Reflection => Some(Strategy::Reflection),
            Label::Exploration => Some(Strategy::Exploration),
            Label::Suggestion => Some(Strategy::Suggestion),
            Label::Neutral => None,
        }
    }
}

impl From<Strategy> for Label {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Reflection => Label::Reflection,
            Strategy::Exploration => Label::Exploration,
            Strategy::Suggestion => Label::Suggestion,
        }
    }
}

/// Multi-label strategy target as a fixed-width indicator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StrategySet(pub [bool; 3]);

impl StrategySet {
    pub fn from_strategies(items: impl IntoIterator<Item = Strategy>) -> Self {
        let mut s = Self::default();
        for x in items {
            s.0[x.index()] = true;
        }
        s
    }

    pub fn contains(&self, s: Strategy) -> bool {
        self.0[s.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = Strategy> + '_ {
        Strategy::ALL.into_iter().filter(|s| self.contains(*s))
    }

    pub fn as_f64(&self) -> [f64; 3] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    HelpSeeker,
    Caregiver,
}

impl FromStr for Speaker {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "help_seeker" => Ok(Speaker::HelpSeeker),
            "caregiver" => Ok(Speaker::Caregiver),
            other => Err(CorpusError::Invalid(format!("unknown speaker {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strategies: Vec<Label>,
}

impl Utterance {
    pub fn seeker(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::HelpSeeker,
            text: text.into(),
            strategies: Vec::new(),
        }
    }

    pub fn caregiver(text: impl Into<String>, labels: &[Label]) -> Self {
        Self {
            speaker: Speaker::Caregiver,
            text: text.into(),
            strategies: labels.to_vec(),
        }
    }

    pub fn strategy_set(&self) -> StrategySet {
        StrategySet::from_strategies(self.strategies.iter().filter_map(|l| l.strategy()))
    }
}

/// One conversation. Utterance indexes are positions in `utterances`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default)]
    pub distress: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effectiveness: Option<i64>,
    pub utterances: Vec<Utterance>,
}

pub const MIN_AGE: i64 = 0;
pub const MAX_AGE: i64 = 120;

/// Validates demographic metadata on its own (used for live sessions too).
pub fn validate_metadata(age: Option<i64>, gender: Option<&str>, taxonomy: &Taxonomy) -> Result<(), CorpusError> {
    if let Some(a) = age {
        if !(MIN_AGE..=MAX_AGE).contains(&a) {
            return Err(CorpusError::Invalid(format!("age {a} outside {MIN_AGE}..={MAX_AGE}")));
        }
    }
    if let Some(g) = gender {
        if !taxonomy.genders.iter().any(|x| x == g) {
            return Err(CorpusError::Invalid(format!("unknown gender {g}")));
        }
    }
    Ok(())
}

impl Session {
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), CorpusError> {
        let ctx = |m: String| CorpusError::Invalid(format!("session {}: {m}", self.id));
        validate_metadata(self.age, self.gender.as_deref(), taxonomy).map_err(|e| ctx(e.to_string()))?;
        for d in &self.distress {
            if !taxonomy.distress_catalogue.iter().any(|x| x == d) {
                return Err(CorpusError::UnknownDistress(d.clone()));
            }
        }
        if let Some(e) = self.effectiveness {
            if !(1..=5).contains(&e) {
                return Err(ctx(format!("effectiveness {e} outside 1..=5")));
            }
        }
        for (i, u) in self.utterances.iter().enumerate() {
            match u.speaker {
                Speaker::HelpSeeker if !u.strategies.is_empty() => {
                    return Err(ctx(format!("help-seeker turn {i} carries strategy labels")));
                }
                Speaker::Caregiver
                    if u.strategies.contains(&Label::Neutral) && u.strategies.len() > 1 =>
                {
                    return Err(ctx(format!("turn {i} mixes Neutral with other labels")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Normalized position of turn `k`: `k / (n - 1)`, or 0 for a single turn.
    pub fn position(&self, k: usize) -> f64 {
        normalized_position(k, self.utterances.len())
    }
}

pub fn normalized_position(k: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        k as f64 / (n - 1) as f64
    }
}

pub fn write_jsonl<W: Write>(mut w: W, sessions: &[Session]) -> Result<(), CorpusError> {
    for s in sessions {
        serde_json::to_writer(&mut w, s).map_err(|e| CorpusError::Invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R, taxonomy: &Taxonomy) -> Result<Vec<Session>, CorpusError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Session = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Invalid(format!("line {}: {e}", n + 1)))?;
        s.validate(taxonomy)?;
        out.push(s);
    }
    Ok(out)
}

pub fn save_corpus(path: &std::path::Path, sessions: &[Session]) -> Result<(), CorpusError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_jsonl(&mut w, sessions)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &std::path::Path, taxonomy: &Taxonomy) -> Result<Vec<Session>, CorpusError> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f), taxonomy)
}
