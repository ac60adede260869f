//! Durable append-only event logs, one per session.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{ServiceError, ServiceResult};
use crate::events::Event;

pub trait EventStore: Send + Sync {
    /// Appends events of one session; they are durable when this returns.
    fn append(&self, session_id: &str, events: &[Event]) -> ServiceResult<()>;
    /// Every stored session with its events, ordered by session id.
    fn load_all(&self) -> ServiceResult<Vec<(String, Vec<Event>)>>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    logs: Mutex<BTreeMap<String, Vec<Event>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventStore for MemoryStore {
    fn append(&self, session_id: &str, events: &[Event]) -> ServiceResult<()> {
        self.logs.lock().expect("store lock").entry(session_id.to_string()).or_default().extend_from_slice(events);
        Ok(())
    }

    fn load_all(&self) -> ServiceResult<Vec<(String, Vec<Event>)>> {
        Ok(self.logs.lock().expect("store lock").iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    }
}

/// One JSON-lines file per session under a directory.
#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    write: Mutex<()>,
}

impl FileStore {
    pub fn open(dir: impl AsRef<Path>) -> ServiceResult<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, write: Mutex::new(()) })
    }

    fn path(&self, session_id: &str) -> ServiceResult<PathBuf> {
        if session_id.is_empty() || !session_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(ServiceError::Validation(format!("unsafe session id {session_id:?}")));
        }
        Ok(self.dir.join(format!("{session_id}.jsonl")))
    }
}

impl EventStore for FileStore {
    fn append(&self, session_id: &str, events: &[Event]) -> ServiceResult<()> {
        let _guard = self.write.lock().expect("store lock");
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(session_id)?)?;
        let mut buf = String::new();
        for e in events {
            buf.push_str(&serde_json::to_string(e).map_err(|e| ServiceError::Validation(e.to_string()))?);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    fn load_all(&self) -> ServiceResult<Vec<(String, Vec<Event>)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mut events = Vec::new();
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: Event = serde_json::from_str(&line)
                    .map_err(|err| ServiceError::Validation(format!("{}:{}: {err}", path.display(), n + 1)))?;
                events.push(e);
            }
            out.push((id, events));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }
}
