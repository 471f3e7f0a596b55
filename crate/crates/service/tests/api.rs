use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use counsel_core::corpus::Taxonomy;
use counsel_core::evaluation::{build_pairwise_tasks, HistoryTurn, PairwiseSource};
use counsel_core::generator::{AdapterConfig, Condition, DecoderConfig, GeneratorConfig, GeneratorModel, SoftPromptConfig, Tokenizer};
use counsel_core::hgt::{HgtConfig, HgtModel, ThresholdSet};
use counsel_core::lexicon::Lexicon;
use counsel_core::session_graph::{conversation_width, HashingEncoder};
use counsel_service::{open, router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const WIDTH: usize = 32;

/// Tiny untrained classifier and SAGE generator checkpoints.
fn write_models(dir: &Path, config: &mut ServiceConfig) {
    let lexicon = Lexicon::bundled();
    let taxonomy = Taxonomy::bundled();
    let hgt = HgtModel::new(HgtConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        category_width: 4,
        utterance_input: WIDTH + 1,
        conversation_input: conversation_width(&taxonomy),
        lexicon_categories: lexicon.len(),
        distress_categories: taxonomy.distress_catalogue.len(),
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let ck = hgt.to_checkpoint(json!({ "encoder": HashingEncoder::new(WIDTH, 0) })).unwrap();
    ck.save(&dir.join("classifier.json")).unwrap();
    let texts = ["i feel alone tonight", "tell me more about that", "that sounds hard", "you could call a friend"];
    let tok = Tokenizer::train(texts.iter().copied(), 300).unwrap();
    let cfg = GeneratorConfig {
        decoder: DecoderConfig { vocab_size: 300, width: 16, layers: 1, heads: 2, context: 300, seed: 1 },
        adapters: AdapterConfig { rank: 2, alpha: 4.0, dropout: 0.0 },
        soft_prompt: SoftPromptConfig { heads: 2, projector_hidden: 8, gate_init: 0.5 },
        max_new_tokens: 6,
        ..Default::default()
    };
    let base = GeneratorModel::base(cfg, tok).unwrap();
    let sage = GeneratorModel::for_condition(&base, Condition::Sage, Some(&hgt)).unwrap();
    sage.to_checkpoint().unwrap().save(&dir.join("generator.json")).unwrap();
    std::fs::write(dir.join("thresholds.json"), serde_json::to_string(&ThresholdSet([0.4, 0.5, 0.6])).unwrap()).unwrap();
    config.classifier_checkpoint = Some(dir.join("classifier.json"));
    config.generator_checkpoint = Some(dir.join("generator.json"));
    config.thresholds = Some(dir.join("thresholds.json"));
}

fn write_eval(dir: &Path, config: &mut ServiceConfig, points: usize, repeat_fraction: f64) {
    let sources: Vec<PairwiseSource> = (0..points)
        .map(|i| PairwiseSource {
            point_id: format!("p{i}"),
            history: vec![HistoryTurn { speaker: counsel_core::corpus::Speaker::HelpSeeker, text: format!("message {i}") }],
            normalized_position: (i as f64 / points as f64).min(1.0),
            responses: [(Condition::Sage, format!("graph reply {i}")), (Condition::VanillaFt, format!("plain reply {i}"))].into_iter().collect(),
        })
        .collect();
    let b = build_pairwise_tasks(&sources, (Condition::Sage, Condition::VanillaFt), repeat_fraction, 5).unwrap();
    let tasks: String = b.tasks.iter().map(|t| serde_json::to_string(t).unwrap() + "\n").collect();
    std::fs::write(dir.join("tasks.jsonl"), tasks).unwrap();
    std::fs::write(dir.join("map.json"), serde_json::to_string(&b.map).unwrap()).unwrap();
    config.eval_tasks = Some(dir.join("tasks.jsonl"));
    config.eval_map = Some(dir.join("map.json"));
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, bytes)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

async fn create(app: &Router) -> String {
    let (s, b) = call(app, "POST", "/v1/sessions", Some(json!({ "age": 30, "gender": Taxonomy::bundled().genders[0] }))).await;
    assert_eq!(s, StatusCode::CREATED);
    json_of(&b)["session_id"].as_str().unwrap().to_string()
}

async fn say(app: &Router, id: &str, speaker: &str, text: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, "POST", &format!("/v1/sessions/{id}/utterances"), Some(json!({ "speaker": speaker, "text": text }))).await;
    (s, json_of(&b))
}

fn state(config: ServiceConfig) -> (Arc<AppState>, Router) {
    let st = open(config).unwrap();
    let app = router(st.clone());
    (st, app)
}

#[tokio::test]
async fn session_creation_validates_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = state(ServiceConfig::new(dir.path()));
    let a = create(&app).await;
    let b = create(&app).await;
    assert_ne!(a, b);
    let (s, _) = call(&app, "POST", "/v1/sessions", Some(json!({ "age": -5 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/v1/sessions", Some(json!({ "gender": "unknown-value" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/v1/sessions", Some(json!({ "age": "old" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/v1/sessions", None).await;
    assert_eq!(s, StatusCode::CREATED);
}

#[tokio::test]
async fn utterances_are_indexed_and_annotated() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = state(ServiceConfig::new(dir.path()));
    let id = create(&app).await;
    let lexicon = Lexicon::bundled();
    let cat = &lexicon.categories()[0];
    let phrase = &cat.phrases[0];
    let text = format!("lately {phrase} most nights");
    let (s, v) = say(&app, &id, "help_seeker", &text).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["index"], 0);
    let start = text.find(phrase.as_str()).unwrap();
    let start = text[..start].chars().count();
    let m = v["lexicon_matches"].as_array().unwrap();
    assert!(m.iter().any(|x| x["category_id"] == cat.id.as_str() && x["start"] == start && x["end"] == start + phrase.chars().count()));
    let (_, v) = say(&app, &id, "caregiver", &text).await;
    assert_eq!(v["lexicon_matches"].as_array().unwrap().len(), 0);
    for i in 2..10 {
        let (_, v) = say(&app, &id, if i % 2 == 0 { "help_seeker" } else { "caregiver" }, "ok").await;
        assert_eq!(v["index"], i);
    }
    let (s, _) = say(&app, &id, "counselor", "hi").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = say(&app, "s999999", "caregiver", "hi").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, b) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(json_of(&b)["utterances"].as_array().unwrap().len(), 10);
}

#[tokio::test]
async fn recommendation_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (_, bare) = state(ServiceConfig::new(dir.path().join("bare")));
    let id = create(&bare).await;
    say(&bare, &id, "help_seeker", "i can't sleep").await;
    let (s, _) = call(&bare, "GET", &format!("/v1/sessions/{id}/recommendation"), None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);

    let mut config = ServiceConfig::new(dir.path().join("data"));
    write_models(dir.path(), &mut config);
    let (_, app) = state(config);
    let id = create(&app).await;
    let uri = format!("/v1/sessions/{id}/recommendation");
    assert_eq!(call(&app, "GET", &uri, None).await.0, StatusCode::CONFLICT);
    say(&app, &id, "help_seeker", "i feel alone tonight").await;
    let (s, first) = call(&app, "GET", &uri, None).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&first));
    let v = json_of(&first);
    let strategies = v["strategies"].as_array().unwrap();
    assert_eq!(strategies.len(), 3);
    for st in strategies {
        let p = st["probability"].as_f64().unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(st["selected"].as_bool().unwrap(), p >= st["threshold"].as_f64().unwrap());
    }
    assert!(v["soft_prompt_gate"].as_f64().is_some());
    assert_eq!(v["model_versions"]["classifier"].as_str().unwrap().len(), 64);
    let (_, again) = call(&app, "GET", &uri, None).await;
    assert_eq!(first, again);
    say(&app, &id, "caregiver", "tell me more").await;
    assert_eq!(call(&app, "GET", &uri, None).await.0, StatusCode::CONFLICT);

    // A fresh process computes the same body from scratch.
    let mut config = ServiceConfig::new(dir.path().join("data2"));
    write_models(dir.path(), &mut config);
    let (_, other) = state(config);
    let id2 = create(&other).await;
    say(&other, &id2, "help_seeker", "i feel alone tonight").await;
    let (_, b) = call(&other, "GET", &format!("/v1/sessions/{id2}/recommendation"), None).await;
    let (x, y) = (json_of(&b), v);
    assert_eq!(x["response_text"], y["response_text"]);
    assert_eq!(x["strategies"], y["strategies"]);
}

#[tokio::test]
async fn health_reports_digests() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(dir.path().join("data"));
    write_models(dir.path(), &mut config);
    let (_, app) = state(config);
    let (s, b) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    let v = json_of(&b);
    assert_eq!(v["models_loaded"], true);
    let want = counsel_service::models::sha256_hex(&std::fs::read(dir.path().join("classifier.json")).unwrap());
    assert_eq!(v["digests"]["classifier"]["sha256"], want.as_str());
}

#[tokio::test]
async fn evaluation_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(dir.path().join("data"));
    write_eval(dir.path(), &mut config, 12, 0.25);
    let (_, app) = state(config.clone());
    let mut served = Vec::new();
    let mut n = 0;
    loop {
        let (s, b) = call(&app, "GET", "/v1/eval/tasks/next", None).await;
        if s == StatusCode::NOT_FOUND {
            break;
        }
        let text = String::from_utf8(b.clone()).unwrap();
        assert!(!text.contains("SAGE") && !text.contains("VanillaFT"), "{text}");
        let v = json_of(&b);
        let task_id = v["task"]["task_id"].as_str().unwrap().to_string();
        let verdict = ["left", "right", "tie"][n % 3];
        let criteria = if verdict == "tie" { json!([]) } else { json!(["Empathy"]) };
        let (s, _) = call(&app, "POST", "/v1/eval/judgments", Some(json!({ "task_id": task_id, "verdict": verdict, "criteria": criteria }))).await;
        assert_eq!(s, StatusCode::CREATED);
        served.push(task_id);
        n += 1;
    }
    assert_eq!(served.len(), 15);
    let log = dir.path().join("data/judgments.jsonl");
    let before = std::fs::read(&log).unwrap();
    let (s, _) = call(&app, "POST", "/v1/eval/judgments", Some(json!({ "task_id": served[0], "verdict": "tie", "criteria": [] }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(std::fs::read(&log).unwrap(), before);
    let (s, b) = call(&app, "GET", "/v1/eval/report", None).await;
    assert_eq!(s, StatusCode::OK);
    let r = json_of(&b);
    let total = r["wins"].as_u64().unwrap() + r["losses"].as_u64().unwrap() + r["ties"].as_u64().unwrap() + r["repeats"].as_u64().unwrap();
    assert_eq!(total, 15);
    let (s, csv) = call(&app, "GET", "/v1/eval/report/flow.csv", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 6);

    let (s, _) = call(&app, "POST", "/v1/eval/judgments", Some(json!({ "task_id": "nope", "verdict": "tie" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, reopened) = state(config);
    let (_, b2) = call(&reopened, "GET", "/v1/eval/report", None).await;
    assert_eq!(b, b2);
}

#[tokio::test]
async fn evaluation_rejects_bare_preferences() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(dir.path().join("data"));
    write_eval(dir.path(), &mut config, 3, 0.0);
    let (_, app) = state(config);
    let (_, b) = call(&app, "GET", "/v1/eval/tasks/next", None).await;
    let id = json_of(&b)["task"]["task_id"].clone();
    let (s, _) = call(&app, "POST", "/v1/eval/judgments", Some(json!({ "task_id": id, "verdict": "left", "criteria": [] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/v1/eval/judgments", Some(json!({ "task_id": id, "verdict": "tie" }))).await;
    assert_eq!(s, StatusCode::CREATED);
}

#[tokio::test]
async fn reported_aggregate_judgments_give_reported_shares() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(dir.path().join("data"));
    write_eval(dir.path(), &mut config, 307, 0.0);
    let (_, app) = state(config);
    let map: counsel_core::evaluation::AssignmentMap = serde_json::from_slice(&std::fs::read(dir.path().join("map.json")).unwrap()).unwrap();
    let mut k = 0;
    loop {
        let (s, b) = call(&app, "GET", "/v1/eval/tasks/next", None).await;
        if s == StatusCode::NOT_FOUND {
            break;
        }
        let id = json_of(&b)["task"]["task_id"].as_str().unwrap().to_string();
        let a = map.assignments.iter().find(|a| a.task_id == id).unwrap();
        let winner = if k < 154 { Some(Condition::Sage) } else if k < 260 { Some(Condition::VanillaFt) } else { None };
        let verdict = match winner {
            None => "tie",
            Some(c) if c == a.left => "left",
            Some(_) => "right",
        };
        let criteria = if winner.is_some() { json!(["Relevance"]) } else { json!([]) };
        call(&app, "POST", "/v1/eval/judgments", Some(json!({ "task_id": id, "verdict": verdict, "criteria": criteria }))).await;
        k += 1;
    }
    let (_, b) = call(&app, "GET", "/v1/eval/report", None).await;
    let r = json_of(&b);
    assert_eq!((r["win_percent"].as_f64(), r["loss_percent"].as_f64(), r["tie_percent"].as_f64()), (Some(50.2), Some(34.5), Some(15.3)));
}

async fn scripted_session(app: &Router, turns: usize) -> String {
    let id = create(app).await;
    for i in 0..turns {
        let speaker = if i % 3 == 2 { "caregiver" } else { "help_seeker" };
        let (s, v) = say(app, &id, speaker, &format!("turn {i}: i feel alone and tired")).await;
        assert_eq!(s, StatusCode::CREATED);
        assert_eq!(v["index"], i);
    }
    id
}

#[tokio::test]
async fn crash_restart_replays_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig::new(dir.path());
    let (st, app) = state(config.clone());
    scripted_session(&app, 50).await;
    scripted_session(&app, 7).await;
    let before = st.sessions.state().await;
    drop(app);
    drop(st);
    let (st2, app2) = state(config.clone());
    assert_eq!(st2.sessions.state().await, before);

    // Snapshot, keep writing, crash, restore from snapshot plus log tail.
    st2.snapshot().await.unwrap();
    scripted_session(&app2, 5).await;
    let before = st2.sessions.state().await;
    drop(app2);
    drop(st2);
    let (st3, app3) = state(config.clone());
    assert_eq!(st3.sessions.state().await, before);

    // A torn final line is dropped and the store keeps accepting writes.
    drop(app3);
    drop(st3);
    let log = dir.path().join("sessions.jsonl");
    let mut raw = std::fs::read(&log).unwrap();
    raw.extend_from_slice(b"{\"type\":\"utterance\",\"session_id\":\"s0000");
    std::fs::write(&log, raw).unwrap();
    let (st4, app4) = state(config);
    assert_eq!(st4.sessions.state().await, before);
    let (s, _) = say(&app4, "s000001", "caregiver", "still here").await;
    assert_eq!(s, StatusCode::CREATED);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_appends_stay_contiguous() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig::new(dir.path());
    let (st, app) = state(config.clone());
    let id = create(&app).await;
    let other = create(&app).await;
    let mut handles = Vec::new();
    for i in 0..40 {
        let app = app.clone();
        let target = if i % 2 == 0 { id.clone() } else { other.clone() };
        handles.push(tokio::spawn(async move { say(&app, &target, "help_seeker", &format!("m{i}")).await.0 }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::CREATED);
    }
    let now = st.sessions.state().await;
    for s in &now {
        assert!(s.utterances.iter().enumerate().all(|(i, u)| u.index == i));
        assert_eq!(s.utterances.len(), 20);
    }
    drop(app);
    drop(st);
    let (st2, _) = state(config);
    assert_eq!(st2.sessions.state().await, now);
}
