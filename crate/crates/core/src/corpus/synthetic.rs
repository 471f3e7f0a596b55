use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Label, Session, Strategy, Taxonomy, Utterance};
use crate::lexicon::Lexicon;
use crate::numerics::SeedStream;

/// Latent rule-based policy mapping recent lexicon categories and session
/// metadata to the next caregiver strategy set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Exploration follows any of these in the current or previous
    /// help-seeker message.
    pub exploration_categories: Vec<String>,
    /// Reflection follows any of these in the current message.
    pub reflection_categories: Vec<String>,
    /// Suggestion follows any lexicon match when the help-seeker's age is
    /// known and below this bound.
    pub suggestion_max_age: i64,
    /// When no rule fires the caregiver turn is Neutral with this
    /// probability, Reflection otherwise.
    pub neutral_rate: f64,
    /// Probability of replacing the policy label set with a random one.
    pub label_noise: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            exploration_categories: s(&["suicidal_ideation", "suicidal_intent", "self_harm", "acquired_capability"]),
            reflection_categories: s(&[
                "hopelessness",
                "loneliness",
                "burdensomeness",
                "thwarted_belongingness",
                "depressive_symptoms",
                "anxiety",
                "worthlessness",
                "guilt_shame",
                "entrapment",
                "trauma",
                "loss_grief",
                "social_rejection",
            ]),
            suggestion_max_age: 30,
            neutral_rate: 0.3,
            label_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub sessions: usize,
    /// Mean utterances per session; lengths are uniform within ±`turn_spread`.
    pub mean_turns: usize,
    pub turn_spread: usize,
    /// Probability that a help-seeker message contains a lexicon phrase.
    pub lexicon_rate: f64,
    /// Probability of a second phrase given a first.
    pub second_phrase_rate: f64,
    /// Probability that a help-seeker sends two messages in a row.
    pub double_message_rate: f64,
    pub age_range: (i64, i64),
    pub missing_age_rate: f64,
    pub missing_gender_rate: f64,
    pub max_distress_labels: usize,
    pub policy: PolicyConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sessions: 150,
            mean_turns: 35,
            turn_spread: 8,
            lexicon_rate: 0.6,
            second_phrase_rate: 0.2,
            double_message_rate: 0.1,
            age_range: (14, 60),
            missing_age_rate: 0.1,
            missing_gender_rate: 0.1,
            max_distress_labels: 3,
            policy: PolicyConfig::default(),
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        let err = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.sessions == 0 {
            return err("sessions must be positive");
        }
        if self.mean_turns == 0 {
            return err("mean_turns must be positive");
        }
        if self.turn_spread >= self.mean_turns {
            return err("turn_spread must be below mean_turns");
        }
        for (name, p) in [
            ("lexicon_rate", self.lexicon_rate),
            ("second_phrase_rate", self.second_phrase_rate),
            ("double_message_rate", self.double_message_rate),
            ("missing_age_rate", self.missing_age_rate),
            ("missing_gender_rate", self.missing_gender_rate),
            ("neutral_rate", self.policy.neutral_rate),
            ("label_noise", self.policy.label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CorpusError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.age_range.0 > self.age_range.1 {
            return err("age_range is empty");
        }
        Ok(())
    }
}

const SEEKER_FILLER: &[&str] = &[
    "hi",
    "hello are you there",
    "i do not really know how to start",
    "it has been a long week",
    "school was hard today",
    "work has been a mess lately",
    "i just got home",
    "i have been thinking a lot",
    "things are complicated",
    "i do not know what to do",
    "sorry for writing so late",
    "my phone is almost dead",
    "i had a weird day",
    "nobody knows i am writing here",
    "maybe this was a mistake",
    "i guess so",
    "yes",
    "not really",
    "i tried talking to my friend",
    "it started a few months ago",
];

const NEUTRAL_REPLIES: &[&str] = &["i am here with you.", "thank you for writing.", "take your time.", "okay."];

fn cue(category: &str) -> String {
    match category {
        "hopelessness" => "hopeless",
        "loneliness" => "alone",
        "suicidal_ideation" => "thoughts of dying",
        "suicidal_intent" => "a plan to end your life",
        "burdensomeness" => "like a burden",
        "thwarted_belongingness" => "like you do not belong",
        "depressive_symptoms" => "empty",
        "self_harm" => "hurting yourself",
        "acquired_capability" => "past attempts",
        "anxiety" => "scared",
        "sleep_disturbance" => "sleep",
        "worthlessness" => "worthless",
        "guilt_shame" => "guilty",
        "entrapment" => "trapped",
        "substance_use" => "drinking",
        "trauma" => "what happened to you",
        "loss_grief" => "your loss",
        "family_conflict" => "your family",
        "social_rejection" => "rejected",
        "agitation" => "angry",
        other => return other.replace('_', " "),
    }
    .to_string()
}

/// Style template a caregiver uses for one strategy, keyed on the lexicon
/// category that triggered it.
pub fn caregiver_template(strategy: Strategy, category: Option<&str>) -> String {
    match (strategy, category) {
        (Strategy::Reflection, Some(c)) => format!("it sounds like you feel {}.", cue(c)),
        (Strategy::Reflection, None) => "it sounds like this is hard for you.".to_string(),
        (Strategy::Exploration, Some(c)) => format!("can you tell me more about {}?", cue(c)),
        (Strategy::Exploration, None) => "can you tell me more?".to_string(),
        (Strategy::Suggestion, Some(c)) => format!("maybe we can find one small step about {}.", cue(c)),
        (Strategy::Suggestion, None) => "maybe we can find one small step.".to_string(),
    }
}

struct SeekerTurn {
    categories: Vec<String>,
}

pub fn generate_synthetic_corpus(
    config: &SyntheticConfig,
    lexicon: &Lexicon,
    taxonomy: &Taxonomy,
    seed: u64,
) -> Result<Vec<Session>, CorpusError> {
    config.validate()?;
    if lexicon.is_empty() && config.lexicon_rate > 0.0 {
        return Err(CorpusError::Config("lexicon_rate > 0 needs a non-empty lexicon".into()));
    }
    let seeds = SeedStream::new(seed);
    let width = (config.sessions.max(2) - 1).to_string().len();
    (0..config.sessions)
        .map(|i| {
            let mut rng = seeds.keyed("synthetic-session", i as u64);
            generate_session(format!("s{i:0width$}"), config, lexicon, taxonomy, &mut rng)
        })
        .collect()
}

fn generate_session(
    id: String,
    config: &SyntheticConfig,
    lexicon: &Lexicon,
    taxonomy: &Taxonomy,
    rng: &mut impl Rng,
) -> Result<Session, CorpusError> {
    let age = (!rng.random_bool(config.missing_age_rate))
        .then(|| rng.random_range(config.age_range.0..=config.age_range.1));
    let gender = if taxonomy.genders.is_empty() || rng.random_bool(config.missing_gender_rate) {
        None
    } else {
        taxonomy.genders.choose(rng).cloned()
    };
    let k = if taxonomy.distress_catalogue.is_empty() || config.max_distress_labels == 0 {
        0
    } else {
        rng.random_range(1..=config.max_distress_labels.min(taxonomy.distress_catalogue.len()))
    };
    let mut distress: Vec<String> = taxonomy
        .distress_catalogue
        .choose_multiple(rng, k)
        .cloned()
        .collect();
    distress.sort_by_key(|d| taxonomy.distress_index(d));
    let effectiveness = rng.random_bool(0.8).then(|| rng.random_range(1..=5));

    let lo = config.mean_turns - config.turn_spread;
    let hi = config.mean_turns + config.turn_spread;
    let target = rng.random_range(lo..=hi);
    let policy = &config.policy;
    let young = age.is_some_and(|a| a < policy.suggestion_max_age);

    let mut utterances = Vec::with_capacity(target + 1);
    let mut previous: Option<SeekerTurn> = None;
    while utterances.len() < target {
        let mut current = seeker_message(config, lexicon, rng, &mut utterances);
        if rng.random_bool(config.double_message_rate) && utterances.len() + 1 < target {
            previous = Some(current);
            current = seeker_message(config, lexicon, rng, &mut utterances);
        }
        if utterances.len() >= target {
            break;
        }
        let in_list = |turn: &SeekerTurn, list: &[String]| -> Option<String> {
            turn.categories.iter().find(|c| list.contains(c)).cloned()
        };
        let explore = in_list(&current, &policy.exploration_categories)
            .or_else(|| previous.as_ref().and_then(|p| in_list(p, &policy.exploration_categories)));
        let reflect = in_list(&current, &policy.reflection_categories);
        let suggest = (young && !current.categories.is_empty()).then(|| current.categories[0].clone());

        let mut chosen: Vec<(Strategy, Option<String>)> = Vec::new();
        if let Some(c) = reflect {
            chosen.push((Strategy::Reflection, Some(c)));
        }
        if let Some(c) = explore {
            chosen.push((Strategy::Exploration, Some(c)));
        }
        if let Some(c) = suggest {
            chosen.push((Strategy::Suggestion, Some(c)));
        }
        if policy.label_noise > 0.0 && rng.random_bool(policy.label_noise) {
            let s = *Strategy::ALL.choose(rng).unwrap();
            chosen = vec![(s, current.categories.first().cloned())];
        }
        let reply = if chosen.is_empty() && rng.random_bool(policy.neutral_rate) {
            Utterance::caregiver(*NEUTRAL_REPLIES.choose(rng).unwrap(), &[Label::Neutral])
        } else {
            if chosen.is_empty() {
                chosen.push((Strategy::Reflection, None));
            }
            let text = chosen
                .iter()
                .map(|(s, c)| caregiver_template(*s, c.as_deref()))
                .collect::<Vec<_>>()
                .join(" ");
            let labels: Vec<Label> = chosen.iter().map(|(s, _)| Label::from(*s)).collect();
            Utterance::caregiver(text, &labels)
        };
        utterances.push(reply);
        previous = Some(current);
    }
    let session = Session {
        id,
        age,
        gender,
        distress,
        effectiveness,
        utterances,
    };
    session.validate(taxonomy)?;
    Ok(session)
}

fn seeker_message(
    config: &SyntheticConfig,
    lexicon: &Lexicon,
    rng: &mut impl Rng,
    out: &mut Vec<Utterance>,
) -> SeekerTurn {
    let mut parts = vec![SEEKER_FILLER.choose(rng).unwrap().to_string()];
    let mut categories = Vec::new();
    if rng.random_bool(config.lexicon_rate) {
        let phrases = if rng.random_bool(config.second_phrase_rate) { 2 } else { 1 };
        for _ in 0..phrases {
            let cat = lexicon.categories().choose(rng).unwrap();
            let phrase = cat.phrases.choose(rng).unwrap();
            if rng.random_bool(0.5) {
                parts.push(phrase.clone());
            } else {
                parts.insert(0, phrase.clone());
            }
            if !categories.contains(&cat.id) {
                categories.push(cat.id.clone());
            }
        }
    }
    out.push(Utterance::seeker(parts.join(" ")));
    // Record what the text actually matches so the policy and the lexicon agree.
    let text = &out.last().unwrap().text;
    let mut matched: Vec<String> = lexicon.annotate(text).into_iter().map(|m| m.category_id).collect();
    matched.dedup();
    let mut ordered = categories;
    for m in matched {
        if !ordered.contains(&m) {
            ordered.push(m);
        }
    }
    SeekerTurn { categories: ordered }
}
