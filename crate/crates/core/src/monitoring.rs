//! Append-only JSONL event log and cursor-based tailing.
//!
//! `events.jsonl` holds one object per line with exactly the keys
//! `{ts, run_id, step, epoch, split, name, value}`. Run status transitions
//! are `system` events named `status` with a string value.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("SinkClosed")]
    SinkClosed,
    #[error("FileMissing: {0}")]
    FileMissing(PathBuf),
    #[error("cursor {cursor} is not a line boundary of {path} ({len} bytes)")]
    InvalidCursor { path: PathBuf, cursor: u64, len: u64 },
    #[error("corrupt event at byte {offset}: {message}")]
    Corrupt { offset: u64, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventValue {
    Number(f64),
    Text(String),
}

impl EventValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            EventValue::Number(x) => Some(*x),
            EventValue::Text(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            EventValue::Text(s) => Some(s),
            EventValue::Number(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
    Stopped,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Queued => "queued",
            RunStatus::Running => "running",
            RunStatus::Succeeded => "succeeded",
            RunStatus::Failed => "failed",
            RunStatus::Stopped => "stopped",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "queued" => RunStatus::Queued,
            "running" => RunStatus::Running,
            "succeeded" => RunStatus::Succeeded,
            "failed" => RunStatus::Failed,
            "stopped" => RunStatus::Stopped,
            _ => return None,
        })
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, RunStatus::Succeeded | RunStatus::Failed | RunStatus::Stopped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricEvent {
    pub ts: u64,
    pub run_id: String,
    pub step: u64,
    pub epoch: u64,
    pub split: Split,
    pub name: String,
    pub value: EventValue,
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl MetricEvent {
    pub fn scalar(run_id: &str, step: u64, epoch: u64, split: Split, name: &str, value: f64) -> Self {
        MetricEvent {
            ts: now_millis(),
            run_id: run_id.to_string(),
            step,
            epoch,
            split,
            name: name.to_string(),
            value: EventValue::Number(value),
        }
    }

    pub fn text(run_id: &str, step: u64, epoch: u64, split: Split, name: &str, value: &str) -> Self {
        MetricEvent {
            ts: now_millis(),
            run_id: run_id.to_string(),
            step,
            epoch,
            split,
            name: name.to_string(),
            value: EventValue::Text(value.to_string()),
        }
    }

    pub fn status(run_id: &str, step: u64, epoch: u64, status: RunStatus) -> Self {
        MetricEvent::text(run_id, step, epoch, Split::System, "status", status.as_str())
    }

    /// Status carried by this event, if it is a status event.
    pub fn run_status(&self) -> Option<RunStatus> {
        (self.split == Split::System && self.name == "status")
            .then(|| self.value.as_str().and_then(RunStatus::parse))
            .flatten()
    }
}

pub trait MetricSink: Send + Sync {
    fn emit(&self, event: MetricEvent) -> Result<(), MonitorError>;
}

/// Appends events to a JSONL file; every emit is flushed before returning.
#[derive(Debug)]
pub struct JsonlSink {
    path: PathBuf,
    file: Mutex<Option<File>>,
}

impl JsonlSink {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, MonitorError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(JsonlSink {
            path,
            file: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn close(&self) {
        self.file.lock().unwrap_or_else(|e| e.into_inner()).take();
    }
}

impl MetricSink for JsonlSink {
    fn emit(&self, event: MetricEvent) -> Result<(), MonitorError> {
        let mut line = serde_json::to_vec(&event).expect("events serialize");
        line.push(b'\n');
        let mut guard = self.file.lock().unwrap_or_else(|e| e.into_inner());
        let file = guard.as_mut().ok_or(MonitorError::SinkClosed)?;
        // one write call per line keeps appends whole for readers
        file.write_all(&line)?;
        file.flush()?;
        Ok(())
    }
}

/// Keeps events in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    events: Mutex<Vec<MetricEvent>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<MetricEvent> {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl MetricSink for MemorySink {
    fn emit(&self, event: MetricEvent) -> Result<(), MonitorError> {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).push(event);
        Ok(())
    }
}

/// Forwards only `system` events; used when metric logging is off.
pub struct SystemOnly<S>(pub S);

impl<S: MetricSink> MetricSink for SystemOnly<S> {
    fn emit(&self, event: MetricEvent) -> Result<(), MonitorError> {
        if event.split == Split::System {
            self.0.emit(event)
        } else {
            Ok(())
        }
    }
}

impl<S: MetricSink + ?Sized> MetricSink for std::sync::Arc<S> {
    fn emit(&self, event: MetricEvent) -> Result<(), MonitorError> {
        (**self).emit(event)
    }
}

/// Whole lines appended after `cursor`, and the offset just past the last one.
///
/// A trailing line without its newline is left for the next call. `cursor`
/// must be 0 or an offset returned by an earlier call.
pub fn tail(path: &Path, cursor: u64) -> Result<(Vec<MetricEvent>, u64), MonitorError> {
    let mut file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(MonitorError::FileMissing(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let len = file.metadata()?.len();
    if cursor > len {
        return Err(MonitorError::InvalidCursor {
            path: path.to_path_buf(),
            cursor,
            len,
        });
    }
    if cursor > 0 {
        let mut prev = [0u8; 1];
        file.seek(SeekFrom::Start(cursor - 1))?;
        file.read_exact(&mut prev)?;
        if prev[0] != b'\n' {
            return Err(MonitorError::InvalidCursor {
                path: path.to_path_buf(),
                cursor,
                len,
            });
        }
    }
    file.seek(SeekFrom::Start(cursor))?;
    let mut buf = Vec::with_capacity((len - cursor) as usize);
    file.read_to_end(&mut buf)?;

    let Some(last_newline) = buf.iter().rposition(|&b| b == b'\n') else {
        return Ok((Vec::new(), cursor));
    };
    let mut events = Vec::new();
    let mut offset = cursor;
    for line in buf[..last_newline].split(|&b| b == b'\n') {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let event = serde_json::from_slice(line).map_err(|e| MonitorError::Corrupt {
            offset: line_offset,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok((events, cursor + last_newline as u64 + 1))
}

/// Last status recorded in an events file.
pub fn last_status(path: &Path) -> Option<RunStatus> {
    let (events, _) = tail(path, 0).ok()?;
    events.iter().rev().find_map(MetricEvent::run_status)
}

/// Plain-text run log (`run.log`).
#[derive(Debug)]
pub struct RunLog {
    file: Mutex<File>,
    echo: bool,
}

impl RunLog {
    pub fn open(path: &Path, echo: bool) -> Result<Self, MonitorError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RunLog {
            file: Mutex::new(file),
            echo,
        })
    }

    pub fn line(&self, msg: &str) {
        let text = format!("[{}] {msg}\n", now_millis());
        if self.echo {
            eprint!("{text}");
        }
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        let _ = f.write_all(text.as_bytes());
        let _ = f.flush();
    }
}
