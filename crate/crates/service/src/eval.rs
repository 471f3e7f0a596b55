use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Mutex;

use counsel_core::evaluation::{analyze_judgments, AssignmentMap, Judgment, JudgmentReport, PairwiseTask, Verdict};
use serde::{Deserialize, Serialize};

use crate::log::{read_snapshot, restore, write_snapshot, EventLog, Snapshot};
use crate::sessions::now_ms;
use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgmentEvent {
    pub judgment: Judgment,
    pub at_ms: u64,
}

#[derive(Debug, Default)]
struct Judged {
    judgments: Vec<Judgment>,
    ids: BTreeSet<String>,
}

/// A loaded task export, its assignment map and the judgments so far.
#[derive(Debug)]
pub struct EvalStore {
    pub tasks: Vec<PairwiseTask>,
    map: AssignmentMap,
    log: Mutex<(EventLog<JudgmentEvent>, Judged)>,
    snapshot_path: std::path::PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct NextTask<'a> {
    pub task: &'a PairwiseTask,
    pub judged: usize,
    pub total: usize,
}

pub const JUDGMENT_LOG: &str = "judgments.jsonl";
pub const JUDGMENT_SNAPSHOT: &str = "judgments.snapshot.json";

pub fn read_tasks(path: &Path) -> Result<Vec<PairwiseTask>, ServiceError> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ServiceError::Config(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

impl EvalStore {
    pub fn open(dir: &Path, tasks: Vec<PairwiseTask>, map: AssignmentMap) -> Result<Self, ServiceError> {
        let known: BTreeSet<&str> = map.assignments.iter().map(|a| a.task_id.as_str()).collect();
        if let Some(t) = tasks.iter().find(|t| !known.contains(t.task_id.as_str())) {
            return Err(ServiceError::Config(format!("task {} has no assignment", t.task_id)));
        }
        let (log, events) = EventLog::open(&dir.join(JUDGMENT_LOG))?;
        let snapshot_path = dir.join(JUDGMENT_SNAPSHOT);
        let snap: Option<Snapshot<Vec<Judgment>>> = read_snapshot(&snapshot_path)?;
        let judgments = restore(snap, events, Vec::new(), |s: &mut Vec<Judgment>, e: JudgmentEvent| {
            s.push(e.judgment);
            Ok(())
        })?;
        let ids = judgments.iter().map(|j| j.task_id.clone()).collect();
        Ok(Self {
            tasks,
            map,
            log: Mutex::new((log, Judged { judgments, ids })),
            snapshot_path,
        })
    }

    /// The first unjudged task in export order whose primary, if any, is
    /// already judged.
    pub fn next(&self) -> Result<NextTask<'_>, ServiceError> {
        let guard = self.log.lock().expect("judgment lock");
        let judged = &guard.1.ids;
        self.tasks
            .iter()
            .find(|t| !judged.contains(&t.task_id) && t.repeat_of.as_ref().is_none_or(|p| judged.contains(p)))
            .map(|task| NextTask {
                task,
                judged: judged.len(),
                total: self.tasks.len(),
            })
            .ok_or_else(|| ServiceError::NotFound("no tasks left".into()))
    }

    pub fn submit(&self, judgment: Judgment) -> Result<(), ServiceError> {
        let task = self
            .tasks
            .iter()
            .find(|t| t.task_id == judgment.task_id)
            .ok_or_else(|| ServiceError::NotFound(format!("task {}", judgment.task_id)))?;
        if judgment.verdict != Verdict::Tie && judgment.criteria.is_empty() {
            return Err(ServiceError::BadRequest("a preference must cite at least one criterion".into()));
        }
        let mut guard = self.log.lock().expect("judgment lock");
        let (log, judged) = &mut *guard;
        if judged.ids.contains(&judgment.task_id) {
            return Err(ServiceError::Conflict(format!("task {} already judged", judgment.task_id)));
        }
        if let Some(p) = &task.repeat_of {
            if !judged.ids.contains(p) {
                return Err(ServiceError::Conflict(format!("task {} repeats {p}, which is not judged yet", task.task_id)));
            }
        }
        log.append(&JudgmentEvent {
            judgment: judgment.clone(),
            at_ms: now_ms(),
        })?;
        judged.ids.insert(judgment.task_id.clone());
        judged.judgments.push(judgment);
        Ok(())
    }

    pub fn judgments(&self) -> Vec<Judgment> {
        self.log.lock().expect("judgment lock").1.judgments.clone()
    }

    pub fn report(&self) -> Result<JudgmentReport, ServiceError> {
        let judgments = self.judgments();
        analyze_judgments(&self.map, &judgments).map_err(|e| ServiceError::Conflict(e.to_string()))
    }

    pub fn snapshot(&self) -> Result<(), ServiceError> {
        let guard = self.log.lock().expect("judgment lock");
        write_snapshot(
            &self.snapshot_path,
            &Snapshot {
                events: guard.0.len(),
                state: guard.1.judgments.clone(),
            },
        )
    }
}
