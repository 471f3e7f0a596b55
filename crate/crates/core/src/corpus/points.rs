use serde::{Deserialize, Serialize};

use super::{Session, Speaker, StrategySet};

/// The last help-seeker message before a strategy-labeled caregiver turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionPoint {
    pub session_id: String,
    pub seeker_index: usize,
    /// The caregiver turn whose labels form the target.
    pub caregiver_index: usize,
    pub targets: StrategySet,
    pub normalized_position: f64,
}

impl InterventionPoint {
    /// Stable identifier `session#caregiver_index`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.session_id, self.caregiver_index)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionReport {
    /// Caregiver turns with strategies but no earlier help-seeker turn.
    pub skipped: Vec<(String, usize)>,
}

pub fn extract_intervention_points(session: &Session) -> (Vec<InterventionPoint>, ExtractionReport) {
    let mut points = Vec::new();
    let mut report = ExtractionReport::default();
    let mut last_seeker = None;
    let n = session.utterances.len();
    for (i, u) in session.utterances.iter().enumerate() {
        match u.speaker {
            Speaker::HelpSeeker => last_seeker = Some(i),
            Speaker::Caregiver => {
                let targets = u.strategy_set();
                if targets.is_empty() {
                    continue;
                }
                match last_seeker {
                    Some(s) => points.push(InterventionPoint {
                        session_id: session.id.clone(),
                        seeker_index: s,
                        caregiver_index: i,
                        targets,
                        normalized_position: super::normalized_position(s, n),
                    }),
                    None => report.skipped.push((session.id.clone(), i)),
                }
            }
        }
    }
    (points, report)
}

/// Points for every session, in corpus order.
pub fn extract_all(sessions: &[Session]) -> (Vec<InterventionPoint>, ExtractionReport) {
    let mut all = Vec::new();
    let mut report = ExtractionReport::default();
    for s in sessions {
        let (p, r) = extract_intervention_points(s);
        all.extend(p);
        report.skipped.extend(r.skipped);
    }
    (all, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Strategy, Utterance};

    fn session(utts: Vec<Utterance>) -> Session {
        Session {
            id: "s".into(),
            age: None,
            gender: None,
            distress: vec![],
            effectiveness: None,
            utterances: utts,
        }
    }

    #[test]
    fn single_exchange_gives_one_point() {
        let s = session(vec![
            Utterance::seeker("hi"),
            Utterance::caregiver("hello", &[Label::Reflection]),
        ]);
        let (p, _) = extract_intervention_points(&s);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].targets, StrategySet::from_strategies([Strategy::Reflection]));
    }

    #[test]
    fn neutral_turns_are_excluded_and_multi_labels_kept() {
        let s = session(vec![
            Utterance::seeker("a"),
            Utterance::caregiver("b", &[Label::Neutral]),
            Utterance::seeker("c"),
            Utterance::caregiver("d", &[Label::Exploration, Label::Suggestion]),
        ]);
        let (p, _) = extract_intervention_points(&s);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].seeker_index, 2);
        assert_eq!(
            p[0].targets,
            StrategySet::from_strategies([Strategy::Exploration, Strategy::Suggestion])
        );
    }

    #[test]
    fn opening_caregiver_turn_is_skipped_and_reported() {
        let s = session(vec![
            Utterance::caregiver("hello", &[Label::Exploration]),
            Utterance::seeker("a"),
            Utterance::caregiver("b", &[Label::Reflection]),
            Utterance::caregiver("c", &[Label::Suggestion]),
        ]);
        let (p, r) = extract_intervention_points(&s);
        assert_eq!(r.skipped, vec![("s".to_string(), 0)]);
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|x| x.seeker_index == 1));
    }
}
