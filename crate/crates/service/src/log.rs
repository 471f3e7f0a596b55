use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Append-only JSONL file, one event per line, synced on every append.
#[derive(Debug)]
pub struct EventLog<E> {
    path: PathBuf,
    file: File,
    len: u64,
    _event: PhantomData<E>,
}

impl<E: Serialize + DeserializeOwned> EventLog<E> {
    /// Opens (or creates) the log and returns every complete event in it.
    /// A torn final line left by a crash mid-append is cut off.
    pub fn open(path: &Path) -> Result<(Self, Vec<E>), ServiceError> {
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let mut events = Vec::new();
        let mut good = 0u64;
        let mut reader = BufReader::new(&mut file);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            if !line.ends_with('\n') {
                tracing::warn!(path = %path.display(), "dropping torn final event");
                break;
            }
            let event = serde_json::from_str(line.trim_end())
                .map_err(|e| ServiceError::Corrupt(format!("{} event {}: {e}", path.display(), events.len() + 1)))?;
            events.push(event);
            good += n as u64;
        }
        drop(reader);
        if file.metadata()?.len() != good {
            file.set_len(good)?;
            file.seek(SeekFrom::End(0))?;
        }
        let len = events.len() as u64;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                len,
                _event: PhantomData,
            },
            events,
        ))
    }

    pub fn append(&mut self, event: &E) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(event).map_err(|e| ServiceError::Corrupt(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.len += 1;
        Ok(())
    }

    /// Number of events in the log.
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Full state as of the first `events` log entries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot<S> {
    pub events: u64,
    pub state: S,
}

pub fn write_snapshot<S: Serialize>(path: &Path, snapshot: &Snapshot<S>) -> Result<(), ServiceError> {
    let tmp = path.with_extension("tmp");
    let body = serde_json::to_vec(snapshot).map_err(|e| ServiceError::Corrupt(e.to_string()))?;
    let mut f = File::create(&tmp)?;
    f.write_all(&body)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_snapshot<S: DeserializeOwned>(path: &Path) -> Result<Option<Snapshot<S>>, ServiceError> {
    match std::fs::read(path) {
        Ok(b) => serde_json::from_slice(&b)
            .map(Some)
            .map_err(|e| ServiceError::Corrupt(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Replays `events` on top of an optional snapshot. The snapshot must not
/// claim more events than the log holds.
pub fn restore<S, E>(
    snapshot: Option<Snapshot<S>>,
    events: Vec<E>,
    empty: S,
    mut apply: impl FnMut(&mut S, E) -> Result<(), ServiceError>,
) -> Result<S, ServiceError> {
    let (skip, mut state) = match snapshot {
        Some(s) => (s.events as usize, s.state),
        None => (0, empty),
    };
    if skip > events.len() {
        return Err(ServiceError::Corrupt(format!("snapshot covers {skip} events but the log has {}", events.len())));
    }
    for e in events.into_iter().skip(skip) {
        apply(&mut state, e)?;
    }
    Ok(state)
}
