//! Project records in an append-only journal (`projects.jsonl`).
//!
//! Each line is a full snapshot of one record; replay keeps the last line
//! per id. A torn final line from a crash is skipped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOURNAL_FILE: &str = "projects.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("NotFound: no project `{0}`")]
    NotFound(String),
    #[error("IllegalTransition: {from} -> {to}")]
    IllegalTransition { from: &'static str, to: &'static str },
    #[error("journal {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectState {
    Created,
    DataReady,
    Running,
    Succeeded,
    Failed,
    Stopped,
}

impl ProjectState {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProjectState::Created => "created",
            ProjectState::DataReady => "data_ready",
            ProjectState::Running => "running",
            ProjectState::Succeeded => "succeeded",
            ProjectState::Failed => "failed",
            ProjectState::Stopped => "stopped",
        }
    }

    /// Declared edges of the project state machine.
    pub fn can_move_to(self, to: ProjectState) -> bool {
        use ProjectState::*;
        matches!(
            (self, to),
            (Created, DataReady)
                | (Created, Running)
                | (DataReady, Running)
                | (Running, Succeeded)
                | (Running, Failed)
                | (Running, Stopped)
                | (Failed, Running)
                | (Stopped, Running)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub fingerprint: String,
    pub rows: usize,
    /// Uploaded train file the project's data path is replaced with.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectRecord {
    pub id: String,
    pub name: String,
    pub task: String,
    /// Config as handed to workers; the token is an env placeholder.
    pub config: String,
    pub state: ProjectState,
    pub created_at: u64,
    pub run_id: Option<String>,
    pub dataset: Option<DatasetInfo>,
    pub message: Option<String>,
}

#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    journal: Mutex<File>,
    records: RwLock<BTreeMap<String, ProjectRecord>>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Every record line of a journal in file order.
pub fn read_journal(path: &Path) -> Result<Vec<ProjectRecord>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}: skipping line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(JOURNAL_FILE);
        let mut records = BTreeMap::new();
        for r in read_journal(&path)? {
            records.insert(r.id.clone(), r);
        }
        let mut journal = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        let torn = std::fs::read(&path).map_err(io(&path))?.last().is_some_and(|b| *b != b'\n');
        if torn {
            journal.write_all(b"\n").map_err(io(&path))?;
        }
        Ok(Store {
            path,
            journal: Mutex::new(journal),
            records: RwLock::new(records),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, id: &str) -> Option<ProjectRecord> {
        self.records.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    pub fn find_by_name(&self, name: &str) -> Option<ProjectRecord> {
        self.records
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .find(|r| r.name == name)
            .cloned()
    }

    pub fn list(&self) -> Vec<ProjectRecord> {
        let mut all: Vec<ProjectRecord> = self
            .records
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect();
        all.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        all
    }

    fn append(&self, journal: &mut File, record: &ProjectRecord) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        journal.write_all(&line).map_err(io(&self.path))?;
        journal.flush().map_err(io(&self.path))
    }

    /// Inserts a new record. Fails if the name is taken.
    pub fn insert(&self, record: ProjectRecord) -> Result<(), Option<ProjectRecord>> {
        let mut journal = self.journal.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = self.find_by_name(&record.name) {
            return Err(Some(existing));
        }
        if let Err(e) = self.append(&mut journal, &record) {
            log::error!("{e}");
            return Err(None);
        }
        self.records
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(record.id.clone(), record);
        Ok(())
    }

    /// Applies `f` to a copy of the record and journals the result if it
    /// changed. State changes must follow [`ProjectState::can_move_to`].
    pub fn update<E: From<StoreError>>(
        &self,
        id: &str,
        f: impl FnOnce(&mut ProjectRecord) -> Result<(), E>,
    ) -> Result<ProjectRecord, E> {
        let mut journal = self.journal.lock().unwrap_or_else(|e| e.into_inner());
        let before = self.get(id).ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        let mut after = before.clone();
        f(&mut after)?;
        if after == before {
            return Ok(after);
        }
        if after.state != before.state && !before.state.can_move_to(after.state) {
            return Err(StoreError::IllegalTransition {
                from: before.state.as_str(),
                to: after.state.as_str(),
            }
            .into());
        }
        self.append(&mut journal, &after)?;
        self.records
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.to_string(), after.clone());
        Ok(after)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, name: &str) -> ProjectRecord {
        ProjectRecord {
            id: id.into(),
            name: name.into(),
            task: "text-classification".into(),
            config: String::new(),
            state: ProjectState::Created,
            created_at: 1,
            run_id: None,
            dataset: None,
            message: None,
        }
    }

    #[test]
    fn replay_keeps_last_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = Store::open(dir.path()).unwrap();
            s.insert(record("a", "one")).unwrap();
            assert!(s.insert(record("b", "one")).is_err());
            s.update::<StoreError>("a", |r| {
                r.state = ProjectState::DataReady;
                Ok(())
            })
            .unwrap();
        }
        // torn tail
        let mut f = OpenOptions::new().append(true).open(dir.path().join(JOURNAL_FILE)).unwrap();
        f.write_all(b"{\"id\":\"a\",\"na").unwrap();
        drop(f);
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.get("a").unwrap().state, ProjectState::DataReady);
        assert_eq!(s.list().len(), 1);
        s.update::<StoreError>("a", |r| {
            r.state = ProjectState::Running;
            Ok(())
        })
        .unwrap();
        drop(s);
        assert_eq!(Store::open(dir.path()).unwrap().get("a").unwrap().state, ProjectState::Running);
    }

    #[test]
    fn illegal_edges_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        s.insert(record("a", "one")).unwrap();
        let r = s.update::<StoreError>("a", |r| {
            r.state = ProjectState::Succeeded;
            Ok(())
        });
        assert!(matches!(r, Err(StoreError::IllegalTransition { .. })));
        assert_eq!(s.get("a").unwrap().state, ProjectState::Created);
    }
}
