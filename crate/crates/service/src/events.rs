//! Append-only JSON-lines session log.
//!
//! Line 1 is a [`LogHeader`]; every following line is one [`Event`]. State is
//! never stored: a session is rebuilt by replaying its events in order.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{ErrorCode, Result, ServiceError};
use crate::session::{PoolSource, SessionConfig};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "header")]
pub struct LogHeader {
    pub version: u32,
    pub session_id: String,
    pub created_ms: u64,
    pub seed: u64,
    pub config: SessionConfig,
    pub pool: PoolSource,
    /// sha256 of the pool contents, checked on replay.
    pub pool_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedItem {
    pub id: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    QueryIssued { query_id: String, items: Vec<LoggedItem> },
    RankingSubmitted { query_id: String, order: Vec<usize> },
    FavoriteSet { item_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub index: u64,
    pub timestamp_ms: u64,
    pub rng_seed: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Where a session's events go. `Memory` keeps nothing (tests, ephemeral
/// sessions).
#[derive(Debug)]
pub enum EventSink {
    Memory,
    File { path: PathBuf, file: File },
}

impl EventSink {
    /// Creates a new log file and writes the header. Fails if the file exists.
    pub fn create(path: impl Into<PathBuf>, header: &LogHeader) -> Result<Self> {
        let path = path.into();
        let mut file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        write_line(&mut file, header)?;
        Ok(Self::File { path, file })
    }

    /// Reopens an existing log for appending.
    pub fn reopen(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(Self::File { path, file })
    }

    pub fn append(&mut self, event: &Event) -> Result<()> {
        match self {
            EventSink::Memory => Ok(()),
            EventSink::File { file, .. } => write_line(file, event),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            EventSink::Memory => None,
            EventSink::File { path, .. } => Some(path),
        }
    }
}

fn write_line<T: Serialize>(file: &mut File, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value).map_err(|e| ServiceError::internal(e.to_string()))?;
    line.push('\n');
    // One write per record so a crash leaves at most one partial line.
    file.write_all(line.as_bytes())?;
    file.flush()?;
    Ok(())
}

/// Cuts a torn final record off the file so appends start on a fresh line.
pub fn truncate_torn_tail(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.last().is_some_and(|&b| b != b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}

/// Reads a whole log. A final line without a newline is a torn write and is
/// dropped with a warning; any other malformed line is an error.
pub fn read_log(path: &Path) -> Result<(LogHeader, Vec<Event>)> {
    let corrupt = |msg: String| ServiceError::new(ErrorCode::LogCorrupt, format!("{}: {msg}", path.display()));
    let mut reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    loop {
        let mut buf = String::new();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        lines.push(buf);
    }
    if let Some(last) = lines.last() {
        if !last.ends_with('\n') {
            log::warn!("{}: dropping torn final record", path.display());
            lines.pop();
        }
    }
    let mut it = lines.iter();
    let header: LogHeader = match it.next() {
        Some(l) => serde_json::from_str(l).map_err(|e| corrupt(format!("bad header: {e}")))?,
        None => return Err(corrupt("empty log".into())),
    };
    if header.version != LOG_VERSION {
        return Err(corrupt(format!("unsupported log version {}", header.version)));
    }
    let mut events = Vec::new();
    for (n, l) in it.enumerate() {
        let e: Event = serde_json::from_str(l).map_err(|e| corrupt(format!("line {}: {e}", n + 2)))?;
        if e.index != n as u64 {
            return Err(corrupt(format!("line {}: expected event index {n}, found {}", n + 2, e.index)));
        }
        events.push(e);
    }
    Ok((header, events))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_json_shape() {
        let e = Event {
            index: 3,
            timestamp_ms: 10,
            rng_seed: 99,
            payload: EventPayload::RankingSubmitted { query_id: "q1".into(), order: vec![2, 0, 1] },
        };
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["type"], "ranking_submitted");
        assert_eq!(v["payload"]["order"], serde_json::json!([2, 0, 1]));
        assert_eq!(v["rng_seed"], 99);
        let back: Event = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn features_round_trip_exactly() {
        let xs = vec![0.1, -1.0 / 3.0, 1e-300, 2.0f64.sqrt(), -0.0];
        let e = Event {
            index: 0,
            timestamp_ms: 0,
            rng_seed: 0,
            payload: EventPayload::QueryIssued {
                query_id: "q0".into(),
                items: vec![LoggedItem { id: "a".into(), features: xs.clone() }],
            },
        };
        let back: Event = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        let EventPayload::QueryIssued { items, .. } = back.payload else { panic!() };
        for (a, b) in items[0].features.iter().zip(&xs) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
