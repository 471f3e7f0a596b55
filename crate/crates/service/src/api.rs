use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use counsel_core::corpus::Speaker;
use counsel_core::evaluation::Judgment;
use counsel_core::lexicon::LexiconMatch;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{AppState, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({ "error": { "code": code, "message": self.to_string() } }))).into_response()
    }
}

type Shared = State<Arc<AppState>>;

fn json_body(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

/// Parses a JSON body, mapping every rejection to a 400.
fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    #[serde(default)]
    age: Option<i64>,
    #[serde(default)]
    gender: Option<String>,
}

async fn create_session(State(s): Shared, body: axum::body::Bytes) -> Result<Response, ServiceError> {
    let req: CreateSession = if body.is_empty() { CreateSession { age: None, gender: None } } else { parse(&body)? };
    let session = s.sessions.create(req.age, req.gender, &s.taxonomy)?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": session.id }))).into_response())
}

async fn get_session(State(s): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let entry = s.sessions.get(&id)?;
    let session = entry.lock().await.session.clone();
    Ok(Json(session).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AppendUtterance {
    speaker: String,
    text: String,
    #[serde(default)]
    edited: bool,
}

#[derive(Serialize)]
struct Appended {
    index: usize,
    lexicon_matches: Vec<LexiconMatch>,
}

async fn append_utterance(State(s): Shared, Path(id): Path<String>, body: axum::body::Bytes) -> Result<Response, ServiceError> {
    s.sessions.get(&id)?;
    let req: AppendUtterance = parse(&body)?;
    let speaker: Speaker = req.speaker.parse().map_err(|e: counsel_core::corpus::CorpusError| ServiceError::BadRequest(e.to_string()))?;
    let u = s.sessions.append_utterance(&id, speaker, req.text, req.edited).await?;
    let lexicon_matches = match speaker {
        Speaker::HelpSeeker => s.lexicon.annotate(&u.text),
        Speaker::Caregiver => Vec::new(),
    };
    Ok((StatusCode::CREATED, Json(Appended { index: u.index, lexicon_matches })).into_response())
}

async fn recommendation(State(s): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let entry = s.sessions.get(&id)?;
    let Some(models) = s.models.clone() else {
        return Err(ServiceError::Unavailable("models are not loaded".into()));
    };
    let key = models.versions.cache_key();
    let (session, index) = {
        let e = entry.lock().await;
        let index = match e.session.utterances.last() {
            Some(u) if u.speaker == Speaker::HelpSeeker => u.index,
            Some(_) => return Err(ServiceError::Conflict("the last turn is the caregiver's".into())),
            None => return Err(ServiceError::Conflict("the session has no help-seeker turn yet".into())),
        };
        if let Some(body) = e.cache.get(&(index, key.clone())) {
            return Ok(json_body(StatusCode::OK, body.to_string()));
        }
        (e.session.to_session(), index)
    };
    let m = models.clone();
    let rec = tokio::task::spawn_blocking(move || m.recommender.recommend(&session, index))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    let body = serde_json::to_string(&json!({
        "session_id": id,
        "seeker_index": index,
        "strategies": rec.strategies,
        "prompted_strategies": rec.prompted,
        "response_text": rec.response_text,
        "soft_prompt_gate": rec.soft_prompt_gate,
        "model_versions": models.versions,
    }))
    .map_err(|e| ServiceError::Internal(e.to_string()))?;
    let body = entry.lock().await.cache.entry((index, key)).or_insert_with(|| Arc::new(body)).clone();
    Ok(json_body(StatusCode::OK, body.to_string()))
}

fn eval_store(s: &AppState) -> Result<&crate::EvalStore, ServiceError> {
    s.eval.as_ref().ok_or_else(|| ServiceError::Unavailable("no evaluation export is loaded".into()))
}

async fn next_task(State(s): Shared) -> Result<Response, ServiceError> {
    let next = eval_store(&s)?.next()?;
    Ok(Json(next).into_response())
}

async fn submit_judgment(State(s): Shared, body: axum::body::Bytes) -> Result<Response, ServiceError> {
    let j: Judgment = parse(&body)?;
    let task_id = j.task_id.clone();
    eval_store(&s)?.submit(j)?;
    Ok((StatusCode::CREATED, Json(json!({ "task_id": task_id }))).into_response())
}

async fn report(State(s): Shared) -> Result<Response, ServiceError> {
    Ok(Json(eval_store(&s)?.report()?).into_response())
}

async fn report_flow(State(s): Shared) -> Result<Response, ServiceError> {
    let csv = eval_store(&s)?.report()?.flow_csv();
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

async fn health(State(s): Shared) -> Response {
    let digests: serde_json::Map<String, serde_json::Value> = s
        .digests
        .iter()
        .map(|(k, d)| (k.clone(), serde_json::to_value(d).unwrap_or_default()))
        .collect();
    Json(json!({
        "status": "ok",
        "models_loaded": s.models.is_some(),
        "model_versions": s.models.as_ref().map(|m| &m.versions),
        "evaluation_loaded": s.eval.is_some(),
        "lexicon_version": s.lexicon.version(),
        "taxonomy_version": s.taxonomy.version,
        "digests": digests,
    }))
    .into_response()
}

async fn log_requests(req: Request<Body>, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let res = next.run(req).await;
    tracing::info!(%method, %path, status = res.status().as_u16(), micros = start.elapsed().as_micros() as u64, "request");
    res
}

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/utterances", post(append_utterance))
        .route("/sessions/{id}/recommendation", get(recommendation))
        .route("/eval/tasks/next", get(next_task))
        .route("/eval/judgments", post(submit_judgment))
        .route("/eval/report", get(report))
        .route("/eval/report/flow.csv", get(report_flow));
    Router::new()
        .nest("/v1", v1)
        .layer(middleware::from_fn(log_requests))
        .with_state(state)
}
