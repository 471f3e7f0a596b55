use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, CAREGIVER, DEFINITION, RESPONSE, SEEKER, SPECIAL_TOKENS, STRATEGY};
use super::GeneratorError;
use crate::corpus::{Session, Speaker, Strategy, Taxonomy};

pub const PROMPT_FORMAT_VERSION: u32 = 1;
pub const WINDOW: usize = 5;

/// Text part of a generation prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    /// Strategies with their definition text, in the order given.
    pub strategies: Vec<(Strategy, String)>,
    pub window: Vec<(Speaker, String)>,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace("<|", "<\\|")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl PromptText {
    /// Builds the prompt for the point at `seeker_index`, with the last
    /// `window` utterances up to and including it.
    pub fn for_point(
        session: &Session,
        seeker_index: usize,
        strategies: &[Strategy],
        taxonomy: &Taxonomy,
        window: usize,
    ) -> Result<Self, GeneratorError> {
        let u = session
            .utterances
            .get(seeker_index)
            .ok_or_else(|| GeneratorError::Invalid(format!("no utterance {seeker_index}")))?;
        if u.speaker != Speaker::HelpSeeker {
            return Err(GeneratorError::Invalid(format!("utterance {seeker_index} is not a help-seeker turn")));
        }
        let start = (seeker_index + 1).saturating_sub(window);
        Ok(Self {
            strategies: strategies.iter().map(|&s| (s, taxonomy.definition(s).to_string())).collect(),
            window: session.utterances[start..=seeker_index]
                .iter()
                .map(|u| (u.speaker, u.text.clone()))
                .collect(),
        })
    }

    /// Fails when the window holds more than `max` turns or a turn taken
    /// from after `seeker_index` in `session`.
    pub fn check_window(&self, session: &Session, seeker_index: usize, max: usize) -> Result<(), GeneratorError> {
        if self.window.len() > max {
            return Err(GeneratorError::Invalid(format!("window of {} exceeds {max}", self.window.len())));
        }
        let start = (seeker_index + 1).saturating_sub(self.window.len());
        let expected: Vec<(Speaker, String)> = session.utterances[start..=seeker_index]
            .iter()
            .map(|u| (u.speaker, u.text.clone()))
            .collect();
        if expected != self.window {
            return Err(GeneratorError::Invalid("window includes utterances after the intervention point".into()));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (st, def) in &self.strategies {
            s.push_str(SPECIAL_TOKENS[STRATEGY - 256]);
            s.push_str(st.name());
            s.push_str(SPECIAL_TOKENS[DEFINITION - 256]);
            s.push_str(&escape(def));
        }
        for (sp, text) in &self.window {
            let tag = match sp {
                Speaker::HelpSeeker => SEEKER,
                Speaker::Caregiver => CAREGIVER,
            };
            s.push_str(SPECIAL_TOKENS[tag - 256]);
            s.push_str(&escape(text));
        }
        s.push_str(SPECIAL_TOKENS[RESPONSE - 256]);
        s
    }

    pub fn parse(s: &str) -> Result<Self, GeneratorError> {
        let bad = |m: &str| GeneratorError::Invalid(format!("prompt parse: {m}"));
        let body = s.strip_suffix(SPECIAL_TOKENS[RESPONSE - 256]).ok_or_else(|| bad("missing response marker"))?;
        let mut segments: Vec<(usize, &str)> = Vec::new();
        let mut rest = body;
        while !rest.is_empty() {
            let (tag, len) = [STRATEGY, DEFINITION, SEEKER, CAREGIVER]
                .iter()
                .find_map(|&t| rest.starts_with(SPECIAL_TOKENS[t - 256]).then(|| (t, SPECIAL_TOKENS[t - 256].len())))
                .ok_or_else(|| bad("expected a tag"))?;
            rest = &rest[len..];
            let end = rest.find("<|").unwrap_or(rest.len());
            segments.push((tag, &rest[..end]));
            rest = &rest[end..];
        }
        let mut out = Self {
            strategies: Vec::new(),
            window: Vec::new(),
        };
        let mut i = 0;
        while i < segments.len() {
            match segments[i].0 {
                STRATEGY => {
                    let st: Strategy = segments[i].1.parse().map_err(|_| bad("unknown strategy"))?;
                    let def = match segments.get(i + 1) {
                        Some((DEFINITION, d)) => unescape(d),
                        _ => return Err(bad("strategy without definition")),
                    };
                    if !out.window.is_empty() {
                        return Err(bad("strategy after window"));
                    }
                    out.strategies.push((st, def));
                    i += 2;
                }
                SEEKER => {
                    out.window.push((Speaker::HelpSeeker, unescape(segments[i].1)));
                    i += 1;
                }
                CAREGIVER => {
                    out.window.push((Speaker::Caregiver, unescape(segments[i].1)));
                    i += 1;
                }
                _ => return Err(bad("stray definition")),
            }
        }
        Ok(out)
    }

    /// Token ids of the serialized prompt, special tags as single ids.
    pub fn encode(&self, tok: &Tokenizer) -> Vec<usize> {
        let mut ids = Vec::new();
        for (st, def) in &self.strategies {
            ids.push(STRATEGY);
            ids.extend(tok.encode(st.name()));
            ids.push(DEFINITION);
            ids.extend(tok.encode(&escape(def)));
        }
        for (sp, text) in &self.window {
            ids.push(match sp {
                Speaker::HelpSeeker => SEEKER,
                Speaker::Caregiver => CAREGIVER,
            });
            ids.extend(tok.encode(&escape(text)));
        }
        ids.push(RESPONSE);
        ids
    }
}
