use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use counsel_core::corpus::{validate_metadata, Session, Speaker, Taxonomy, Utterance};
use serde::{Deserialize, Serialize};

use crate::log::{read_snapshot, restore, write_snapshot, EventLog, Snapshot};
use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveUtterance {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    /// Caregiver turn sent after editing a recommendation.
    #[serde(default)]
    pub edited: bool,
    pub at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveSession {
    pub id: String,
    pub age: Option<i64>,
    pub gender: Option<String>,
    pub utterances: Vec<LiveUtterance>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

impl LiveSession {
    pub fn to_session(&self) -> Session {
        Session {
            id: self.id.clone(),
            age: self.age,
            gender: self.gender.clone(),
            distress: Vec::new(),
            effectiveness: None,
            utterances: self
                .utterances
                .iter()
                .map(|u| Utterance {
                    speaker: u.speaker,
                    text: u.text.clone(),
                    strategies: Vec::new(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Created {
        id: String,
        age: Option<i64>,
        gender: Option<String>,
        at_ms: u64,
    },
    Utterance {
        session_id: String,
        index: usize,
        speaker: Speaker,
        text: String,
        #[serde(default)]
        edited: bool,
        at_ms: u64,
    },
}

type State = BTreeMap<String, LiveSession>;

fn apply(state: &mut State, event: SessionEvent) -> Result<(), ServiceError> {
    match event {
        SessionEvent::Created { id, age, gender, at_ms } => {
            if state.contains_key(&id) {
                return Err(ServiceError::Corrupt(format!("session {id} created twice")));
            }
            state.insert(
                id.clone(),
                LiveSession {
                    id,
                    age,
                    gender,
                    utterances: Vec::new(),
                    created_ms: at_ms,
                    updated_ms: at_ms,
                },
            );
        }
        SessionEvent::Utterance {
            session_id,
            index,
            speaker,
            text,
            edited,
            at_ms,
        } => {
            let s = state
                .get_mut(&session_id)
                .ok_or_else(|| ServiceError::Corrupt(format!("utterance for unknown session {session_id}")))?;
            if index != s.utterances.len() {
                return Err(ServiceError::Corrupt(format!("session {session_id}: index {index} out of sequence")));
            }
            s.utterances.push(LiveUtterance {
                index,
                speaker,
                text,
                edited,
                at_ms,
            });
            s.updated_ms = at_ms;
        }
    }
    Ok(())
}

/// A session plus its recommendation cache. The cache is derived data and
/// is not persisted.
#[derive(Debug)]
pub struct SessionEntry {
    pub session: LiveSession,
    pub cache: BTreeMap<(usize, String), Arc<String>>,
}

/// Live sessions backed by an event log. Each session has its own writer
/// lock; the log lock is only held for the append itself.
#[derive(Debug)]
pub struct SessionStore {
    log: Mutex<EventLog<SessionEvent>>,
    sessions: RwLock<BTreeMap<String, Arc<tokio::sync::Mutex<SessionEntry>>>>,
    snapshot_path: std::path::PathBuf,
}

pub const SESSION_LOG: &str = "sessions.jsonl";
pub const SESSION_SNAPSHOT: &str = "sessions.snapshot.json";

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl SessionStore {
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        let (log, events) = EventLog::open(&dir.join(SESSION_LOG))?;
        let snapshot_path = dir.join(SESSION_SNAPSHOT);
        let snap: Option<Snapshot<Vec<LiveSession>>> = read_snapshot(&snapshot_path)?;
        let snap = snap.map(|s| Snapshot {
            events: s.events,
            state: s.state.into_iter().map(|x| (x.id.clone(), x)).collect::<State>(),
        });
        let state = restore(snap, events, State::new(), apply)?;
        let sessions = state
            .into_iter()
            .map(|(id, session)| {
                (
                    id,
                    Arc::new(tokio::sync::Mutex::new(SessionEntry {
                        session,
                        cache: BTreeMap::new(),
                    })),
                )
            })
            .collect();
        Ok(Self {
            log: Mutex::new(log),
            sessions: RwLock::new(sessions),
            snapshot_path,
        })
    }

    fn append(&self, event: &SessionEvent) -> Result<(), ServiceError> {
        self.log.lock().expect("log lock").append(event)
    }

    pub fn create(&self, age: Option<i64>, gender: Option<String>, taxonomy: &Taxonomy) -> Result<LiveSession, ServiceError> {
        validate_metadata(age, gender.as_deref(), taxonomy).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let mut sessions = self.sessions.write().expect("session map lock");
        let id = format!("s{:06}", sessions.len() + 1);
        let event = SessionEvent::Created {
            id: id.clone(),
            age,
            gender,
            at_ms: now_ms(),
        };
        self.append(&event)?;
        let mut state = State::new();
        apply(&mut state, event)?;
        let session = state.remove(&id).expect("just created");
        sessions.insert(
            id,
            Arc::new(tokio::sync::Mutex::new(SessionEntry {
                session: session.clone(),
                cache: BTreeMap::new(),
            })),
        );
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<SessionEntry>>, ServiceError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub async fn append_utterance(&self, id: &str, speaker: Speaker, text: String, edited: bool) -> Result<LiveUtterance, ServiceError> {
        if text.trim().is_empty() {
            return Err(ServiceError::BadRequest("empty utterance".into()));
        }
        if edited && speaker != Speaker::Caregiver {
            return Err(ServiceError::BadRequest("only caregiver turns can be marked edited".into()));
        }
        let entry = self.get(id)?;
        let mut entry = entry.lock().await;
        let event = SessionEvent::Utterance {
            session_id: id.to_string(),
            index: entry.session.utterances.len(),
            speaker,
            text,
            edited,
            at_ms: now_ms(),
        };
        self.append(&event)?;
        let mut state = State::new();
        state.insert(id.to_string(), std::mem::replace(&mut entry.session, placeholder()));
        apply(&mut state, event)?;
        entry.session = state.remove(id).expect("present");
        Ok(entry.session.utterances.last().cloned().expect("just appended"))
    }

    /// Every session, ordered by id.
    pub async fn state(&self) -> Vec<LiveSession> {
        let entries: Vec<_> = self.sessions.read().expect("session map lock").values().cloned().collect();
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            out.push(e.lock().await.session.clone());
        }
        out
    }

    /// Writes a snapshot of the current state. Appends are held off while
    /// it is taken so the event count matches the state.
    pub async fn snapshot(&self) -> Result<(), ServiceError> {
        loop {
            let entries: Vec<_> = self.sessions.read().expect("session map lock").values().cloned().collect();
            let mut guards = Vec::with_capacity(entries.len());
            for e in &entries {
                guards.push(e.lock().await);
            }
            let snap = {
                let map = self.sessions.read().expect("session map lock");
                if map.len() != entries.len() {
                    continue;
                }
                let log = self.log.lock().expect("log lock");
                Snapshot {
                    events: log.len(),
                    state: guards.iter().map(|g| g.session.clone()).collect::<Vec<_>>(),
                }
            };
            return write_snapshot(&self.snapshot_path, &snap);
        }
    }
}

fn placeholder() -> LiveSession {
    LiveSession {
        id: String::new(),
        age: None,
        gender: None,
        utterances: Vec::new(),
        created_ms: 0,
        updated_ms: 0,
    }
}
