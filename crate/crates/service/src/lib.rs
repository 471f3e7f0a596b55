//! HTTP service for live decision support and the blind pairwise
//! evaluation workflow. All routes live under `/v1`.

mod api;
pub mod eval;
pub mod log;
pub mod models;
pub mod sessions;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use counsel_core::corpus::Taxonomy;
use counsel_core::evaluation::AssignmentMap;
use counsel_core::lexicon::Lexicon;
use serde::{Deserialize, Serialize};

pub use api::router;
pub use eval::EvalStore;
pub use models::{load_models, LoadedModels, ModelVersions};
pub use sessions::{LiveSession, LiveUtterance, SessionStore};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("internal: {0}")]
    Internal(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub version: u32,
    pub bind: String,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    #[serde(default)]
    pub classifier_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Option<PathBuf>,
    #[serde(default)]
    pub generator_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub eval_tasks: Option<PathBuf>,
    #[serde(default)]
    pub eval_map: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: CONFIG_VERSION,
            bind: "127.0.0.1:8080".into(),
            data_dir: data_dir.into(),
            lexicon: None,
            taxonomy: None,
            classifier_checkpoint: None,
            thresholds: None,
            generator_checkpoint: None,
            eval_tasks: None,
            eval_map: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let raw = std::fs::read_to_string(path)?;
        let c: Self = serde_json::from_str(&raw).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        if c.version != CONFIG_VERSION {
            return Err(ServiceError::Config(format!("config version {} is not {CONFIG_VERSION}", c.version)));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug)]
pub struct AppState {
    pub config: ServiceConfig,
    pub lexicon: Lexicon,
    pub taxonomy: Taxonomy,
    pub sessions: SessionStore,
    pub eval: Option<EvalStore>,
    pub models: Option<Arc<LoadedModels>>,
    pub digests: Vec<(String, FileDigest)>,
}

fn digest(name: &str, path: &Path) -> Result<(String, FileDigest), ServiceError> {
    Ok((
        name.to_string(),
        FileDigest {
            path: path.display().to_string(),
            sha256: models::sha256_hex(&std::fs::read(path)?),
        },
    ))
}

/// Loads resources and replays the stores under `data_dir`.
pub fn open(config: ServiceConfig) -> Result<Arc<AppState>, ServiceError> {
    std::fs::create_dir_all(&config.data_dir)?;
    let lexicon = match &config.lexicon {
        Some(p) => Lexicon::load(p).map_err(|e| ServiceError::Config(e.to_string()))?,
        None => Lexicon::bundled(),
    };
    let taxonomy = match &config.taxonomy {
        Some(p) => Taxonomy::load(p).map_err(|e| ServiceError::Config(e.to_string()))?,
        None => Taxonomy::bundled(),
    };
    let mut digests = Vec::new();
    let models = match (&config.classifier_checkpoint, &config.generator_checkpoint) {
        (Some(c), Some(g)) => {
            digests.push(digest("classifier", c)?);
            digests.push(digest("generator", g)?);
            if let Some(t) = &config.thresholds {
                digests.push(digest("thresholds", t)?);
            }
            Some(Arc::new(load_models(c, config.thresholds.as_deref(), g, lexicon.clone(), taxonomy.clone())?))
        }
        (None, None) => None,
        _ => return Err(ServiceError::Config("classifier and generator checkpoints go together".into())),
    };
    let eval = match (&config.eval_tasks, &config.eval_map) {
        (Some(t), Some(m)) => {
            digests.push(digest("eval_tasks", t)?);
            let tasks = eval::read_tasks(t)?;
            let map: AssignmentMap = serde_json::from_slice(&std::fs::read(m)?)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", m.display())))?;
            Some(EvalStore::open(&config.data_dir, tasks, map)?)
        }
        (None, None) => None,
        _ => return Err(ServiceError::Config("evaluation tasks and assignment map go together".into())),
    };
    let sessions = SessionStore::open(&config.data_dir)?;
    Ok(Arc::new(AppState {
        config,
        lexicon,
        taxonomy,
        sessions,
        eval,
        models,
        digests,
    }))
}

impl AppState {
    /// Full-state snapshots of both stores.
    pub async fn snapshot(&self) -> Result<(), ServiceError> {
        self.sessions.snapshot().await?;
        if let Some(e) = &self.eval {
            e.snapshot()?;
        }
        Ok(())
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Serves until interrupted, then snapshots the stores.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = open(config)?;
    let listener = tokio::net::TcpListener::bind(&state.config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    state.snapshot().await?;
    tracing::info!("snapshot written");
    Ok(())
}
