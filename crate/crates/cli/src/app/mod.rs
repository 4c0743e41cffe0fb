//! HTTP app server: project lifecycle, dataset upload, run control and
//! long-polled event logs. Serves the web UI bundle at `/`.

mod error;
mod handlers;
pub mod store;

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;

use trainforge_core::config::{load_project, process_env, ValidatedProject};
use trainforge_core::dispatch::{
    detect_container_runtime, pid_alive, read_lock, stop, terminate_pid, LocalMode, RunHandle, STOP_GRACE,
};
use trainforge_core::models::TrainerBindings;
use trainforge_core::monitoring::{last_status, RunStatus};
use trainforge_core::pipeline::EVENTS_FILE;

pub use error::ApiError;
pub use store::{read_journal, DatasetInfo, ProjectRecord, ProjectState, Store, StoreError, JOURNAL_FILE};

/// Longest a log request waits for new events.
pub const MAX_LONG_POLL: Duration = Duration::from_secs(25);
pub const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

#[derive(Clone)]
pub struct AppConfig {
    pub data_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    /// Bearer token required on `/api/*`; `None` is open local mode.
    pub api_token: Option<String>,
    pub bindings: Arc<TrainerBindings>,
    pub dry_run_adapters: bool,
    pub local_mode: LocalMode,
    /// Executable with the `worker` subcommand; defaults to this one.
    pub worker_exe: Option<PathBuf>,
    pub container_runtime: Option<PathBuf>,
    pub hub_endpoint: Option<String>,
    /// Relative data paths in submitted configs resolve against this.
    pub base_dir: PathBuf,
    pub stop_grace: Duration,
    pub max_long_poll: Duration,
}

impl AppConfig {
    pub fn new(data_dir: &Path) -> Self {
        AppConfig {
            data_dir: data_dir.to_path_buf(),
            static_dir: None,
            api_token: None,
            bindings: Arc::new(TrainerBindings::new()),
            dry_run_adapters: false,
            local_mode: LocalMode::Subprocess,
            worker_exe: None,
            container_runtime: detect_container_runtime(),
            hub_endpoint: std::env::var("HUB_ENDPOINT").ok(),
            base_dir: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
            stop_grace: STOP_GRACE,
            max_long_poll: MAX_LONG_POLL,
        }
    }
}

pub struct AppState {
    pub cfg: AppConfig,
    pub store: Store,
    /// Validated configs with their secrets; memory only.
    projects: Mutex<HashMap<String, ValidatedProject>>,
    handles: Mutex<HashMap<String, RunHandle>>,
    guards: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    /// Opens (or creates) the data directory and replays the journal.
    pub fn open(mut cfg: AppConfig) -> Result<Arc<Self>, StoreError> {
        cfg.data_dir = std::path::absolute(&cfg.data_dir).unwrap_or(cfg.data_dir);
        let store = Store::open(&cfg.data_dir)?;
        let env = process_env();
        let mut projects = HashMap::new();
        for r in store.list() {
            match load_project(&r.config, &env) {
                Ok(p) => {
                    projects.insert(r.id.clone(), p);
                }
                Err(e) => log::warn!("project {} is not runnable in this environment: {e}", r.name),
            }
        }
        let state = Arc::new(AppState {
            cfg,
            store,
            projects: Mutex::new(projects),
            handles: Mutex::new(HashMap::new()),
            guards: Mutex::new(HashMap::new()),
        });
        for r in state.store.list() {
            state.reconcile(&r.id);
        }
        Ok(state)
    }

    pub fn projects_dir(&self) -> PathBuf {
        self.cfg.data_dir.join("projects")
    }

    pub fn project_dir(&self, name: &str) -> PathBuf {
        self.projects_dir().join(name)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cfg.data_dir.join("cache")
    }

    fn project(&self, id: &str) -> Option<ValidatedProject> {
        self.projects.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    fn set_project(&self, id: &str, p: ValidatedProject) {
        self.projects
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.to_string(), p);
    }

    fn handle(&self, id: &str) -> Option<RunHandle> {
        self.handles.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    /// Serializes mutations of one project.
    fn guard(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.guards
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    /// Settles a `running` record no live handle of this server tracks,
    /// e.g. after a restart: a dead worker means the run is over.
    fn reconcile(&self, id: &str) {
        let Some(rec) = self.store.get(id) else { return };
        if rec.state != ProjectState::Running || self.handle(id).is_some() {
            return;
        }
        let dir = self.project_dir(&rec.name);
        if matches!(read_lock(&dir), Some((run, pid)) if Some(&run) == rec.run_id.as_ref() && pid_alive(pid)) {
            return;
        }
        let status = last_status(&dir.join(EVENTS_FILE))
            .filter(RunStatus::is_terminal)
            .unwrap_or(RunStatus::Failed);
        let _ = self.store.update::<StoreError>(id, |r| {
            if r.state == ProjectState::Running {
                r.state = to_state(status);
                r.message = Some("run ended while the server was not watching".into());
            }
            Ok(())
        });
    }

    /// Mirrors a finished handle into its record.
    fn finish_run(&self, id: &str, handle: &RunHandle) {
        let status = handle.status();
        if status.is_terminal() {
            let message = handle.message();
            let _ = self.store.update::<StoreError>(id, |r| {
                if r.state == ProjectState::Running && r.run_id.as_deref() == Some(handle.run_id()) {
                    r.state = to_state(status);
                    r.message = message;
                }
                Ok(())
            });
        }
        let mut handles = self.handles.lock().unwrap_or_else(|e| e.into_inner());
        if handles.get(id).is_some_and(|h| h.run_id() == handle.run_id()) {
            handles.remove(id);
        }
    }

    /// Stops every run this server started.
    pub fn shutdown(&self) {
        let running: Vec<(String, RunHandle)> = self
            .handles
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (id, h) in running {
            if stop(&h).is_ok() {
                self.finish_run(&id, &h);
            }
        }
    }

    fn stop_orphan(&self, rec: &ProjectRecord) {
        let dir = self.project_dir(&rec.name);
        if let Some((run, pid)) = read_lock(&dir) {
            if Some(&run) == rec.run_id.as_ref() && pid_alive(pid) {
                terminate_pid(pid, self.cfg.stop_grace);
            }
        }
    }
}

pub fn to_state(status: RunStatus) -> ProjectState {
    match status {
        RunStatus::Succeeded => ProjectState::Succeeded,
        RunStatus::Stopped => ProjectState::Stopped,
        RunStatus::Queued => ProjectState::DataReady,
        RunStatus::Running => ProjectState::Running,
        RunStatus::Failed => ProjectState::Failed,
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/health", get(handlers::health))
        .route("/api/tasks", get(handlers::list_tasks))
        .route("/api/tasks/{task}/params", get(handlers::task_params))
        .route("/api/projects", get(handlers::list_projects).post(handlers::create_project))
        .route("/api/projects/{id}", get(handlers::get_project))
        .route(
            "/api/projects/{id}/dataset",
            post(handlers::upload_dataset).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/api/projects/{id}/start", post(handlers::start))
        .route("/api/projects/{id}/stop", post(handlers::stop_run))
        .route("/api/projects/{id}/logs", get(handlers::logs))
        .route("/", get(handlers::index))
        .fallback(handlers::fallback)
        .method_not_allowed_fallback(handlers::method_not_allowed);
    api.layer(axum::middleware::from_fn_with_state(state.clone(), handlers::auth))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
