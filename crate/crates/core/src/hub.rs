//! Model-hub client.
//!
//! Wire protocol (plain HTTP, endpoint from `HUB_ENDPOINT`):
//!
//! * `GET  <endpoint>/api/<kind>s/<repo_id>/tree` lists `{revision, files: [{path}]}`
//! * `GET  <endpoint>/<kind>s/<repo_id>/resolve/<revision>/<path>` downloads one file
//! * `PUT  <endpoint>/api/<kind>s/<repo_id>/upload/<path>` uploads one file
//!
//! Requests carry `Authorization: Bearer <token>` when a token is set.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Secret;

pub const DEFAULT_ENDPOINT: &str = "https://huggingface.co";
pub const ENDPOINT_ENV: &str = "HUB_ENDPOINT";
const REVISION_MARKER: &str = ".hub-revision";
const PUSH_MARKER: &str = ".push-progress.json";

#[derive(Debug, Error)]
pub enum HubError {
    #[error("invalid repo id `{0}` (expected namespace/name)")]
    InvalidRepoId(String),
    #[error("NotFound: {0}")]
    NotFound(String),
    #[error("AuthRequired: {0}")]
    AuthRequired(String),
    #[error("QuotaExceeded: {0}")]
    QuotaExceeded(String),
    #[error("NetworkError after {attempts} attempts: {message}")]
    NetworkError { attempts: u32, message: String },
    #[error("unexpected hub response: {0}")]
    Protocol(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HubError + '_ {
    move |source| HubError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepoKind {
    Model,
    Dataset,
}

impl RepoKind {
    pub fn plural(&self) -> &'static str {
        match self {
            RepoKind::Model => "models",
            RepoKind::Dataset => "datasets",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HubRef {
    pub repo_id: String,
    pub kind: RepoKind,
    pub revision: Option<String>,
}

fn is_repo_part(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '.' || c == '-')
}

pub fn is_repo_id(s: &str) -> bool {
    matches!(s.split_once('/'), Some((ns, name)) if is_repo_part(ns) && is_repo_part(name))
}

impl HubRef {
    pub fn new(repo_id: &str, kind: RepoKind) -> Result<Self, HubError> {
        if !is_repo_id(repo_id) {
            return Err(HubError::InvalidRepoId(repo_id.to_string()));
        }
        Ok(HubRef {
            repo_id: repo_id.to_string(),
            kind,
            revision: None,
        })
    }

    pub fn at_revision(mut self, revision: &str) -> Self {
        self.revision = Some(revision.to_string());
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeEntry {
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeListing {
    #[serde(default = "default_revision")]
    pub revision: String,
    pub files: Vec<TreeEntry>,
}

fn default_revision() -> String {
    "main".into()
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct PushProgress {
    repo_id: String,
    uploaded: Vec<String>,
}

/// Relative path with only normal components.
fn safe_relative(path: &str) -> Option<PathBuf> {
    let p = Path::new(path);
    let ok = !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    ok.then(|| p.to_path_buf())
}

#[derive(Debug, Clone)]
pub struct HubClient {
    endpoint: String,
    token: Option<Secret>,
    backoff: Vec<Duration>,
    http: Client,
}

impl HubClient {
    pub fn new(endpoint: &str) -> Self {
        HubClient {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            token: None,
            backoff: vec![Duration::from_secs(1), Duration::from_secs(2), Duration::from_secs(4)],
            http: Client::builder()
                .timeout(Duration::from_secs(300))
                .build()
                .expect("http client builds"),
        }
    }

    /// Endpoint from `HUB_ENDPOINT`, falling back to the public hub.
    pub fn from_env() -> Self {
        HubClient::new(&std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| DEFAULT_ENDPOINT.into()))
    }

    pub fn with_token(mut self, token: Option<Secret>) -> Self {
        self.token = token.filter(|t| !t.expose().is_empty());
        self
    }

    /// Waits between retries; the default is 1s, 2s, 4s.
    pub fn with_backoff(mut self, backoff: Vec<Duration>) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn repo_url(&self, target: &HubRef) -> String {
        match target.kind {
            RepoKind::Model => format!("{}/{}", self.endpoint, target.repo_id),
            RepoKind::Dataset => format!("{}/datasets/{}", self.endpoint, target.repo_id),
        }
    }

    fn authorize(&self, req: RequestBuilder, token: Option<&Secret>) -> RequestBuilder {
        match token.or(self.token.as_ref()) {
            Some(t) => req.bearer_auth(t.expose()),
            None => req,
        }
    }

    /// Sends with retries on transport errors and 5xx; maps error statuses.
    fn send(&self, what: &str, build: impl Fn() -> RequestBuilder) -> Result<Response, HubError> {
        let attempts = self.backoff.len() as u32 + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.backoff[attempt as usize - 1]);
            }
            match build().send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return Ok(resp);
                    }
                    match status {
                        StatusCode::NOT_FOUND => return Err(HubError::NotFound(what.to_string())),
                        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                            return Err(HubError::AuthRequired(what.to_string()))
                        }
                        StatusCode::PAYLOAD_TOO_LARGE | StatusCode::INSUFFICIENT_STORAGE => {
                            return Err(HubError::QuotaExceeded(what.to_string()))
                        }
                        s if s.is_server_error() => last = format!("{what}: HTTP {s}"),
                        s => return Err(HubError::Protocol(format!("{what}: HTTP {s}"))),
                    }
                }
                Err(e) => last = format!("{what}: {e}"),
            }
            log::warn!("hub request failed (attempt {}/{attempts}): {last}", attempt + 1);
        }
        Err(HubError::NetworkError {
            attempts,
            message: last,
        })
    }

    pub fn list_tree(&self, target: &HubRef) -> Result<TreeListing, HubError> {
        let url = format!(
            "{}/api/{}/{}/tree",
            self.endpoint,
            target.kind.plural(),
            target.repo_id
        );
        let resp = self.send(&target.repo_id, || self.authorize(self.http.get(&url), None))?;
        let text = resp
            .text()
            .map_err(|e| HubError::Protocol(format!("tree body: {e}")))?;
        serde_json::from_str(&text).map_err(|e| HubError::Protocol(format!("tree listing: {e}")))
    }

    /// Materializes the repository under `dest_dir/<repo_id>`.
    ///
    /// Idempotent: when the recorded revision matches, nothing is downloaded.
    pub fn pull(&self, target: &HubRef, dest_dir: &Path) -> Result<PathBuf, HubError> {
        let root = dest_dir.join(&target.repo_id);
        let marker = root.join(REVISION_MARKER);
        let recorded = fs::read_to_string(&marker).ok().map(|s| s.trim().to_string());
        if let (Some(want), Some(have)) = (&target.revision, &recorded) {
            if want == have {
                return Ok(root);
            }
        }
        let listing = self.list_tree(target)?;
        if let Some(want) = &target.revision {
            if want != &listing.revision {
                return Err(HubError::NotFound(format!("{}@{want}", target.repo_id)));
            }
        }
        if recorded.as_deref() == Some(listing.revision.as_str()) {
            return Ok(root);
        }

        let staging = dest_dir.join(format!(".{}.partial", target.repo_id.replace('/', "__")));
        let _ = fs::remove_dir_all(&staging);
        for entry in &listing.files {
            let rel = safe_relative(&entry.path)
                .ok_or_else(|| HubError::Protocol(format!("unsafe file path {}", entry.path)))?;
            let url = format!(
                "{}/{}/{}/resolve/{}/{}",
                self.endpoint,
                target.kind.plural(),
                target.repo_id,
                listing.revision,
                entry.path
            );
            let resp = self.send(&entry.path, || self.authorize(self.http.get(&url), None))?;
            let bytes = resp
                .bytes()
                .map_err(|e| HubError::Protocol(format!("{}: {e}", entry.path)))?;
            let out = staging.join(rel);
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(&out, &bytes).map_err(io_err(&out))?;
        }
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        fs::write(staging.join(REVISION_MARKER), &listing.revision).map_err(io_err(&staging))?;
        if let Some(parent) = root.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let _ = fs::remove_dir_all(&root);
        fs::rename(&staging, &root).map_err(io_err(&root))?;
        Ok(root)
    }

    fn upload(&self, target: &HubRef, rel: &str, bytes: Vec<u8>, token: &Secret) -> Result<(), HubError> {
        let url = format!(
            "{}/api/{}/{}/upload/{}",
            self.endpoint,
            target.kind.plural(),
            target.repo_id,
            rel
        );
        self.send(rel, || {
            self.authorize(self.http.put(&url), Some(token)).body(bytes.clone())
        })?;
        Ok(())
    }

    /// Uploads every file of `artifact_dir` (plus a generated model card when
    /// the directory has none) and returns the repository URL.
    ///
    /// Progress is recorded in a marker file so a failed push resumes where
    /// it stopped.
    pub fn push_artifact(&self, artifact_dir: &Path, target: &HubRef, token: &Secret) -> Result<String, HubError> {
        if token.expose().trim().is_empty() {
            return Err(HubError::AuthRequired("empty token".into()));
        }
        let card = artifact_dir.join("README.md");
        if !card.exists() {
            let metadata = fs::read(artifact_dir.join("metadata.json"))
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or(serde_json::Value::Null);
            fs::write(&card, model_card(&target.repo_id, &metadata)).map_err(io_err(&card))?;
        }

        let marker = artifact_dir.join(PUSH_MARKER);
        let mut progress: PushProgress = fs::read(&marker)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .filter(|p: &PushProgress| p.repo_id == target.repo_id)
            .unwrap_or_else(|| PushProgress {
                repo_id: target.repo_id.clone(),
                uploaded: Vec::new(),
            });

        let mut files: Vec<String> = fs::read_dir(artifact_dir)
            .map_err(io_err(artifact_dir))?
            .flatten()
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with('.'))
            .collect();
        files.sort();
        for name in files {
            if progress.uploaded.contains(&name) {
                continue;
            }
            let path = artifact_dir.join(&name);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            self.upload(target, &name, bytes, token)?;
            progress.uploaded.push(name);
            let json = serde_json::to_vec(&progress).expect("progress serializes");
            fs::write(&marker, json).map_err(io_err(&marker))?;
        }
        let _ = fs::remove_file(&marker);
        Ok(self.repo_url(target))
    }
}

/// Markdown model card built from artifact metadata.
pub fn model_card(repo_id: &str, metadata: &serde_json::Value) -> String {
    let field = |k: &str| {
        metadata
            .get(k)
            .map(|v| match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .unwrap_or_else(|| "unknown".into())
    };
    let mut card = format!(
        "---\ntags:\n- trainforge\n---\n\n# {repo_id}\n\nTrained with trainforge.\n\n\
         - task: `{}`\n- base model: `{}`\n- dataset fingerprint: `{}`\n",
        field("task"),
        field("base_model"),
        field("fingerprint"),
    );
    if let Some(metrics) = metadata.get("metrics").and_then(|m| m.as_object()) {
        card.push_str("\n## Metrics\n\n| metric | value |\n|---|---|\n");
        for (k, v) in metrics {
            card.push_str(&format!("| {k} | {v} |\n"));
        }
    }
    card
}
