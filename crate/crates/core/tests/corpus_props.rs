use counsel_core::corpus::{
    extract_all, extract_intervention_points, generate_synthetic_corpus, load_corpus, save_corpus, split_corpus,
    Label, Session, Speaker, Strategy as Strat, StrategySet, SyntheticConfig, Taxonomy, Utterance, DEFAULT_RATIOS,
};
use counsel_core::lexicon::Lexicon;
use proptest::prelude::*;

fn small(sessions: usize) -> SyntheticConfig {
    SyntheticConfig {
        sessions,
        mean_turns: 12,
        turn_spread: 4,
        ..Default::default()
    }
}

/// Re-scan oracle: for each caregiver turn walk backwards to the nearest
/// help-seeker turn.
fn rescan(s: &Session) -> Vec<(usize, usize, StrategySet)> {
    let mut out = Vec::new();
    for (i, u) in s.utterances.iter().enumerate() {
        if u.speaker != Speaker::Caregiver {
            continue;
        }
        let set = StrategySet::from_strategies(u.strategies.iter().filter_map(|l| l.strategy()));
        if set.is_empty() {
            continue;
        }
        if let Some(j) = (0..i).rev().find(|&j| s.utterances[j].speaker == Speaker::HelpSeeker) {
            out.push((j, i, set));
        }
    }
    out
}

fn arb_session() -> impl Strategy<Value = Session> {
    let label = prop_oneof![
        Just(vec![Label::Neutral]),
        Just(vec![Label::Reflection]),
        Just(vec![Label::Exploration, Label::Suggestion]),
        Just(vec![Label::Reflection, Label::Exploration, Label::Suggestion]),
        Just(vec![]),
    ];
    proptest::collection::vec((any::<bool>(), label), 0..25).prop_map(|turns| Session {
        id: "x".into(),
        age: None,
        gender: None,
        distress: vec![],
        effectiveness: None,
        utterances: turns
            .into_iter()
            .map(|(seeker, l)| if seeker { Utterance::seeker("a") } else { Utterance::caregiver("b", &l) })
            .collect(),
    })
}

proptest! {
    #[test]
    fn extraction_matches_rescan(s in arb_session()) {
        let (points, _) = extract_intervention_points(&s);
        let got: Vec<_> = points.iter().map(|p| (p.seeker_index, p.caregiver_index, p.targets)).collect();
        prop_assert_eq!(got, rescan(&s));
        for p in &points {
            prop_assert_eq!(s.utterances[p.seeker_index].speaker, Speaker::HelpSeeker);
            prop_assert!(!p.targets.is_empty());
        }
    }
}

#[test]
fn reference_sized_corpus_has_comparable_scale() {
    let lex = Lexicon::bundled();
    let tax = Taxonomy::bundled();
    let sessions = generate_synthetic_corpus(&SyntheticConfig::default(), &lex, &tax, 42).unwrap();
    let utterances: usize = sessions.iter().map(|s| s.utterances.len()).sum();
    let (points, report) = extract_all(&sessions);
    println!("sessions {} utterances {utterances} points {}", sessions.len(), points.len());
    assert_eq!(sessions.len(), 150);
    assert!((4800..=5800).contains(&utterances), "{utterances}");
    // reference density is 2258 points over 150 sessions
    assert!((1700..=2800).contains(&points.len()), "{}", points.len());
    assert!(report.skipped.is_empty());
    for s in &sessions {
        s.validate(&tax).unwrap();
    }
}

#[test]
fn zero_insertion_rate_gives_no_matches() {
    let lex = Lexicon::bundled();
    let tax = Taxonomy::bundled();
    let cfg = SyntheticConfig { lexicon_rate: 0.0, ..small(20) };
    let sessions = generate_synthetic_corpus(&cfg, &lex, &tax, 3).unwrap();
    assert!(sessions.iter().flat_map(|s| &s.utterances).all(|u| lex.annotate(&u.text).is_empty()));
}

#[test]
fn suicidal_ideation_is_always_followed_by_exploration() {
    let lex = Lexicon::bundled();
    let tax = Taxonomy::bundled();
    let sessions = generate_synthetic_corpus(&small(60), &lex, &tax, 5).unwrap();
    let by_id: std::collections::HashMap<_, _> = sessions.iter().map(|s| (s.id.clone(), s)).collect();
    let (points, _) = extract_all(&sessions);
    let mut hits = 0;
    for p in &points {
        let text = &by_id[&p.session_id].utterances[p.seeker_index].text;
        if lex.annotate(text).iter().any(|m| m.category_id == "suicidal_ideation") {
            hits += 1;
            assert!(p.targets.contains(Strat::Exploration));
        }
    }
    assert!(hits > 10);
}

#[test]
fn generation_is_seed_deterministic_and_file_round_trips() {
    let lex = Lexicon::bundled();
    let tax = Taxonomy::bundled();
    let a = generate_synthetic_corpus(&small(15), &lex, &tax, 9).unwrap();
    let b = generate_synthetic_corpus(&small(15), &lex, &tax, 9).unwrap();
    let c = generate_synthetic_corpus(&small(15), &lex, &tax, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_corpus(&p1, &a).unwrap();
    save_corpus(&p2, &b).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(load_corpus(&p1, &tax).unwrap(), a);
}

#[test]
fn unknown_distress_label_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    std::fs::write(&p, r#"{"id":"a","distress":["moon_sickness"],"utterances":[]}"#).unwrap();
    let err = load_corpus(&p, &Taxonomy::bundled()).unwrap_err().to_string();
    assert!(err.contains("moon_sickness"), "{err}");
}

#[test]
fn eight_sessions_split_six_one_one_deterministically() {
    let lex = Lexicon::bundled();
    let tax = Taxonomy::bundled();
    let s = generate_synthetic_corpus(&small(8), &lex, &tax, 1).unwrap();
    let a = split_corpus(&s, DEFAULT_RATIOS, 42).unwrap();
    assert_eq!(a.sizes(), (6, 1, 1));
    assert_eq!(a, split_corpus(&s, DEFAULT_RATIOS, 42).unwrap());
    assert!(split_corpus(&s[..2], DEFAULT_RATIOS, 42).is_err());
    assert!(split_corpus(&s, [0.5, 0.3, 0.1], 42).is_err());
}

#[test]
fn splits_partition_sessions_for_every_seed() {
    let lex = Lexicon::bundled();
    let tax = Taxonomy::bundled();
    let s = generate_synthetic_corpus(&small(23), &lex, &tax, 2).unwrap();
    let all: std::collections::BTreeSet<_> = s.iter().map(|x| x.id.clone()).collect();
    for seed in 0..100 {
        let sp = split_corpus(&s, DEFAULT_RATIOS, seed).unwrap();
        let mut union = std::collections::BTreeSet::new();
        for id in sp.train.iter().chain(&sp.val).chain(&sp.test) {
            assert!(union.insert(id.clone()), "{id} in two splits");
        }
        assert_eq!(union, all);
    }
}
