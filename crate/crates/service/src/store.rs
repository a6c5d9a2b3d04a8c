//! Append-only persistence for annotation sessions.
//!
//! Each session owns a directory holding its immutable setup, both
//! embedding matrices (JSONL, so every coordinate survives exactly) and an
//! `events.jsonl` log with one [`LogRecord`] per line. Any prefix of the log
//! is a valid session; a torn final line is dropped when the log is opened.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use diffuse_core::iterative::SessionEvent;
use diffuse_core::vectors::{EmbeddingMatrix, SpaceMode, VectorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session {0} already exists")]
    Exists(String),
    #[error("{path}: line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Vectors(#[from] VectorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What the annotator sees for one example.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleText {
    pub input: String,
    pub output_a: String,
    pub output_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub id: String,
    pub created_ms: u64,
    pub mode: SpaceMode,
    /// Secret that decides which model is shown on which side.
    pub blinding_seed: u64,
    pub texts: BTreeMap<String, ExampleText>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub event: SessionEvent,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Open handle on a session's event log.
#[derive(Debug)]
pub struct EventLog {
    file: File,
    next_seq: u64,
}

impl EventLog {
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Appends `events` and syncs them to disk.
    pub fn append(&mut self, events: &[SessionEvent]) -> Result<(), StoreError> {
        if events.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        let timestamp_ms = now_ms();
        for (i, event) in events.iter().enumerate() {
            let record = LogRecord {
                seq: self.next_seq + i as u64,
                timestamp_ms,
                event: event.clone(),
            };
            serde_json::to_writer(&mut buf, &record)?;
            buf.push(b'\n');
        }
        self.file.write_all(&buf)?;
        self.file.sync_data()?;
        self.next_seq += events.len() as u64;
        Ok(())
    }
}

/// Parses a log, returning its records and the byte length of the valid
/// prefix. Only an unterminated or unparsable final line is tolerated.
pub fn parse_log(bytes: &[u8], path: &Path) -> Result<(Vec<LogRecord>, usize), StoreError> {
    let mut records = Vec::new();
    let mut offset = 0;
    let mut line = 0;
    while offset < bytes.len() {
        line += 1;
        let Some(end) = bytes[offset..].iter().position(|&b| b == b'\n').map(|e| offset + e) else {
            log::warn!("{}: dropping torn final line {line}", path.display());
            break;
        };
        let text = &bytes[offset..end];
        let is_last = end + 1 == bytes.len();
        match serde_json::from_slice::<LogRecord>(text) {
            Ok(r) => {
                if r.seq != records.len() as u64 {
                    return Err(StoreError::Corrupt {
                        path: path.to_path_buf(),
                        line,
                        reason: format!("expected seq {}, found {}", records.len(), r.seq),
                    });
                }
                records.push(r);
            }
            Err(e) if is_last => {
                log::warn!("{}: dropping unreadable final line {line}: {e}", path.display());
                break;
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    line,
                    reason: e.to_string(),
                })
            }
        }
        offset = end + 1;
    }
    Ok((records, offset))
}

/// A persisted session as read back from disk.
#[derive(Debug)]
pub struct StoredSession {
    pub setup: Setup,
    pub embeddings_a: EmbeddingMatrix,
    pub embeddings_b: EmbeddingMatrix,
    pub events: Vec<SessionEvent>,
    pub log: EventLog,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn write_matrix(path: &Path, m: &EmbeddingMatrix) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        m.write_jsonl(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    /// Persists a new session and its first events.
    pub fn create(
        &self,
        setup: &Setup,
        a: &EmbeddingMatrix,
        b: &EmbeddingMatrix,
        events: &[SessionEvent],
    ) -> Result<EventLog, StoreError> {
        let dir = self.dir(&setup.id);
        if dir.exists() {
            return Err(StoreError::Exists(setup.id.clone()));
        }
        // build in a scratch directory so a crash never leaves half a session
        let tmp = self.root.join(format!(".{}.tmp", setup.id));
        fs::create_dir_all(&tmp)?;
        fs::write(tmp.join("setup.json"), serde_json::to_vec_pretty(setup)?)?;
        Self::write_matrix(&tmp.join("embeddings_a.jsonl"), a)?;
        Self::write_matrix(&tmp.join("embeddings_b.jsonl"), b)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(tmp.join("events.jsonl"))?;
        let mut log = EventLog { file, next_seq: 0 };
        log.append(events)?;
        fs::rename(&tmp, &dir)?;
        Ok(log)
    }

    pub fn exists(&self, id: &str) -> bool {
        self.dir(id).join("setup.json").is_file()
    }

    pub fn load(&self, id: &str) -> Result<StoredSession, StoreError> {
        let dir = self.dir(id);
        let setup: Setup = serde_json::from_slice(&fs::read(dir.join("setup.json"))?)?;
        let embeddings_a = EmbeddingMatrix::read_jsonl(File::open(dir.join("embeddings_a.jsonl"))?)?;
        let embeddings_b = EmbeddingMatrix::read_jsonl(File::open(dir.join("embeddings_b.jsonl"))?)?;
        let path = dir.join("events.jsonl");
        let bytes = fs::read(&path)?;
        let (records, valid) = parse_log(&bytes, &path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        if valid < bytes.len() {
            file.set_len(valid as u64)?;
        }
        let log = EventLog {
            file,
            next_seq: records.len() as u64,
        };
        Ok(StoredSession {
            setup,
            embeddings_a,
            embeddings_b,
            events: records.into_iter().map(|r| r.event).collect(),
            log,
        })
    }

    /// Ids of every persisted session.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') && self.exists(&name) {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }
}
