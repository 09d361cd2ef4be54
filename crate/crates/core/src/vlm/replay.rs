//! Recorded decisions keyed by scene digest.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Decider, Decision, Query, VlmError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub key: String,
    pub request_digest: String,
    pub decision: Decision,
}

fn log_err(path: &Path, message: impl ToString) -> VlmError {
    VlmError::ReplayLog {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// An in-memory replay log. When a key was recorded more than once the
/// first record wins.
#[derive(Debug, Clone, Default)]
pub struct ReplayLog {
    records: Vec<ReplayRecord>,
    index: HashMap<String, usize>,
}

impl ReplayLog {
    pub fn from_records(records: Vec<ReplayRecord>) -> Self {
        let mut index = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            index.entry(r.key.clone()).or_insert(i);
        }
        Self { records, index }
    }

    pub fn load(path: &Path) -> Result<Self, VlmError> {
        let file = File::open(path).map_err(|e| log_err(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| log_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayRecord = serde_json::from_str(&line)
                .map_err(|e| log_err(path, format!("line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }

    pub fn records(&self) -> &[ReplayRecord] {
        &self.records
    }

    pub fn get(&self, key: &str) -> Option<&ReplayRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }
}

pub fn replay_decide(key: &str, log: &ReplayLog) -> Result<Decision, VlmError> {
    log.get(key)
        .map(|r| r.decision.clone())
        .ok_or_else(|| VlmError::MissingKey(key.to_string()))
}

/// Append-only JSONL writer, safe to share between threads.
#[derive(Debug)]
pub struct ReplayWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl ReplayWriter {
    pub fn open(path: &Path) -> Result<Self, VlmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| log_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, rec: &ReplayRecord) -> Result<(), VlmError> {
        let mut line = serde_json::to_string(rec).map_err(|e| log_err(&self.path, e))?;
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| log_err(&self.path, e))
    }
}

pub struct ReplayDecider {
    log: ReplayLog,
}

impl ReplayDecider {
    pub fn new(log: ReplayLog) -> Self {
        Self { log }
    }
}

impl Decider for ReplayDecider {
    fn decide(&mut self, q: &Query<'_>) -> Result<Decision, VlmError> {
        let d = replay_decide(&q.scene_key(), &self.log)?;
        d.check_labels(q.candidates)?;
        Ok(d)
    }
}
