//! On-disk session persistence.
//!
//! Each session lives in `<data-dir>/sessions/<id>/` as `session.json` (the
//! creation metadata, written once and atomically) and `events.jsonl` (one
//! event per line, synced after every batch). Recovery replays the log; a
//! torn final line or an exchange without its commit marker is cut off.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rehearsal_core::engine::{SessionEvent, SessionMeta, SessionState};
use rehearsal_core::ingest::write_atomic;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt event log {path} at byte {position}")]
    CorruptLog { path: PathBuf, position: u64 },
    #[error("bad session metadata {path}: {message}")]
    BadMeta { path: PathBuf, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Result of reloading one session.
#[derive(Debug)]
pub struct Recovered {
    pub state: SessionState,
    /// Problems found and repaired while loading, if any.
    pub repaired: Option<StoreError>,
    pub dropped_events: usize,
}

impl Store {
    pub fn open(data_dir: &Path) -> Result<Self, StoreError> {
        let root = data_dir.join("sessions");
        fs::create_dir_all(&root).map_err(io(&root))?;
        Ok(Store { root })
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn create(&self, meta: &SessionMeta) -> Result<(), StoreError> {
        let dir = self.dir(&meta.session_id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let events = dir.join("events.jsonl");
        File::create(&events).map_err(io(&events))?;
        let meta_path = dir.join("session.json");
        let bytes = serde_json::to_vec_pretty(meta).expect("metadata serializes");
        write_atomic(&meta_path, &bytes).map_err(|e| StoreError::Io {
            path: meta_path.clone(),
            source: std::io::Error::other(e.to_string()),
        })
    }

    /// Appends a batch of events and syncs it to disk.
    pub fn append(&self, id: &str, events: &[SessionEvent]) -> Result<(), StoreError> {
        let path = self.dir(id).join("events.jsonl");
        let mut buf = Vec::new();
        for e in events {
            serde_json::to_writer(&mut buf, e).expect("event serializes");
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new().append(true).open(&path).map_err(io(&path))?;
        f.write_all(&buf).map_err(io(&path))?;
        f.sync_data().map_err(io(&path))
    }

    pub fn session_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io(&self.root))? {
            let entry = entry.map_err(io(&self.root))?;
            if entry.path().join("session.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Loads a session, truncating the log to the last complete exchange.
    pub fn recover(&self, id: &str) -> Result<Recovered, StoreError> {
        let dir = self.dir(id);
        let meta_path = dir.join("session.json");
        let meta_bytes = fs::read(&meta_path).map_err(io(&meta_path))?;
        let meta: SessionMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| StoreError::BadMeta { path: meta_path.clone(), message: e.to_string() })?;

        let log_path = dir.join("events.jsonl");
        let (events, ends, corrupt_at) = match File::open(&log_path) {
            Ok(f) => read_log(f, &log_path)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (Vec::new(), Vec::new(), None),
            Err(e) => return Err(io(&log_path)(e)),
        };
        let (state, dropped) = SessionState::replay(meta, &events);
        let kept = events.len() - dropped;
        let keep_bytes = if kept == 0 { 0 } else { ends[kept - 1] };
        let repaired = corrupt_at.map(|position| StoreError::CorruptLog { path: log_path.clone(), position });
        if repaired.is_some() || dropped > 0 {
            let f = OpenOptions::new().write(true).create(true).truncate(false).open(&log_path).map_err(io(&log_path))?;
            f.set_len(keep_bytes).map_err(io(&log_path))?;
            f.sync_data().map_err(io(&log_path))?;
        }
        Ok(Recovered { state, repaired, dropped_events: dropped })
    }
}

type LogContents = (Vec<SessionEvent>, Vec<u64>, Option<u64>);

/// Parses complete lines; returns events, the byte offset after each, and the
/// offset of the first bad or torn line.
fn read_log(f: File, path: &Path) -> Result<LogContents, StoreError> {
    let mut reader = BufReader::new(f);
    let mut events = Vec::new();
    let mut ends = Vec::new();
    let mut pos = 0u64;
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line).map_err(io(path))?;
        if n == 0 {
            return Ok((events, ends, None));
        }
        let complete = line.last() == Some(&b'\n');
        match serde_json::from_slice::<SessionEvent>(&line) {
            Ok(e) if complete => {
                pos += n as u64;
                events.push(e);
                ends.push(pos);
            }
            _ => return Ok((events, ends, Some(pos))),
        }
    }
}
