use std::fs;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Multipart, Path, Query, Request, State};
use axum::http::{header, Method, StatusCode, Uri};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Deserialize;
use serde_json::{json, Value};

use trainforge_core::config::{load_project, process_env, render_for_spawn, ValidatedProject};
use trainforge_core::dataset::{cache_store, load_dataset, process_dataset, DatasetError, LoadContext};
use trainforge_core::dispatch::{dispatch, stop, DispatchError, DispatchOptions};
use trainforge_core::hub::is_repo_id;
use trainforge_core::monitoring::{now_millis, tail, MonitorError};
use trainforge_core::pipeline::EVENTS_FILE;
use trainforge_core::registry;
use trainforge_core::trainer::latest_checkpoint;

use super::{ApiError, AppState, DatasetInfo, ProjectRecord, ProjectState};

type ApiResult<T> = Result<T, ApiError>;

const INDEX_HTML: &str = include_str!("../../static/index.html");
const UPLOAD_EXTENSIONS: [&str; 3] = ["csv", "jsonl", "zip"];

pub async fn auth(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.cfg.api_token {
        let path = req.uri().path();
        if path.starts_with("/api/") && path != "/api/health" {
            let ok = req
                .headers()
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "))
                .is_some_and(|t| t == token);
            if !ok {
                return ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or wrong bearer token")
                    .into_response();
            }
        }
    }
    next.run(req).await
}

pub async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub async fn list_tasks() -> Json<Value> {
    Json(json!(registry::list_tasks()))
}

pub async fn task_params(Path(task): Path<String>) -> ApiResult<Json<Value>> {
    let spec = registry::resolve_task(&task)
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "UnknownTask", e.to_string()))?;
    Ok(Json(json!({
        "task": spec.id,
        "params": spec.param_schema,
    })))
}

fn record_json(r: &ProjectRecord) -> Value {
    json!({
        "id": r.id,
        "name": r.name,
        "task": r.task,
        "state": r.state,
        "created_at": r.created_at,
        "run_id": r.run_id,
        "dataset": r.dataset,
        "message": r.message,
    })
}

pub async fn list_projects(State(st): State<Arc<AppState>>) -> Json<Value> {
    let all: Vec<Value> = st
        .store
        .list()
        .iter()
        .map(|r| {
            st.reconcile(&r.id);
            record_json(&st.store.get(&r.id).unwrap_or_else(|| r.clone()))
        })
        .collect();
    Json(json!(all))
}

fn record(st: &AppState, id: &str) -> ApiResult<ProjectRecord> {
    st.reconcile(id);
    st.store
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("no project `{id}`")))
}

fn runnable(st: &AppState, id: &str) -> ApiResult<ValidatedProject> {
    st.project(id).ok_or_else(|| {
        ApiError::conflict(
            "ConfigUnavailable",
            "the project config references environment variables this server does not have",
        )
    })
}

pub async fn get_project(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(record_json(&record(&st, &id)?)))
}

pub async fn create_project(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let v: Value = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("body is not JSON: {e}")))?;
    let text = match v.get("config") {
        Some(Value::String(s)) => s.clone(),
        Some(obj @ Value::Object(_)) => {
            serde_yaml::to_string(obj).map_err(|e| ApiError::bad_request(format!("config object: {e}")))?
        }
        _ => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "MissingRequiredKey",
                "body needs `config` as a YAML string or an object",
            )
            .with("error_key_path", "config"))
        }
    };
    let project = load_project(&text, &process_env()).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.kind(), e.to_string()).with("error_key_path", e.key_path())
    })?;
    let rec = ProjectRecord {
        id: uuid::Uuid::new_v4().to_string(),
        name: project.config.project_name.clone(),
        task: project.spec.id.canonical(),
        config: render_for_spawn(&project.config),
        state: ProjectState::Created,
        created_at: now_millis(),
        run_id: None,
        dataset: None,
        message: None,
    };
    match st.store.insert(rec.clone()) {
        Ok(()) => {}
        Err(Some(existing)) => {
            return Err(ApiError::conflict(
                "DuplicateProjectName",
                format!("a project named `{}` exists", existing.name),
            )
            .with("id", existing.id))
        }
        Err(None) => return Err(ApiError::internal("cannot write project journal")),
    }
    let dir = st.project_dir(&rec.name);
    fs::create_dir_all(&dir).map_err(|e| ApiError::internal(format!("{}: {e}", dir.display())))?;
    st.set_project(&rec.id, project);
    Ok((StatusCode::CREATED, Json(json!({ "id": rec.id, "name": rec.name, "state": rec.state }))))
}

fn dataset_error(e: DatasetError) -> ApiError {
    let kind = e.to_string().split(':').next().unwrap_or("DatasetError").to_string();
    match e {
        DatasetError::UnsupportedFormat(_) => ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, &kind, e.to_string()),
        DatasetError::Io { .. } | DatasetError::CacheCorrupt { .. } => ApiError::internal(e.to_string()),
        _ => {
            let record = e.record_index();
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, &kind, e.to_string()).with("record", record)
        }
    }
}

struct Upload {
    split: String,
    ext: String,
    bytes: Bytes,
}

fn process_upload(st: &AppState, rec: &ProjectRecord, project: &ValidatedProject, files: Vec<Upload>) -> ApiResult<DatasetInfo> {
    let dir = st.project_dir(&rec.name).join("upload");
    let internal = |e: std::io::Error| ApiError::internal(format!("{}: {e}", dir.display()));
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(internal)?;
    }
    fs::create_dir_all(&dir).map_err(internal)?;
    let train_split = &project.config.data.train_split;
    let mut train_path = None;
    for f in &files {
        let path = dir.join(format!("{}.{}", f.split, f.ext));
        fs::write(&path, &f.bytes).map_err(internal)?;
        if &f.split == train_split {
            train_path = Some(path);
        }
    }
    let train_path = train_path.ok_or_else(|| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "SplitNotFound", format!("no file for split `{train_split}`"))
    })?;
    let mut project = project.clone();
    project.config.data.path = train_path.display().to_string();
    let ctx = LoadContext::new(st.project_dir(&rec.name).join("data")).with_base_dir(&dir);
    let raw = load_dataset(&project.config.data, &ctx).map_err(dataset_error)?;
    let processed = process_dataset(&raw, &project).map_err(dataset_error)?;
    cache_store(&processed, &st.cache_dir()).map_err(dataset_error)?;
    Ok(DatasetInfo {
        fingerprint: processed.fingerprint.clone(),
        rows: processed.rows(),
        path: project.config.data.path,
    })
}

pub async fn upload_dataset(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    multipart: Result<Multipart, MultipartRejection>,
) -> ApiResult<Json<Value>> {
    let mut multipart = multipart
        .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "UnsupportedFormat", e.body_text()))?;
    let guard = st.guard(&id);
    let _held = guard.lock().await;
    let rec = record(&st, &id)?;
    if !matches!(rec.state, ProjectState::Created | ProjectState::DataReady) {
        return Err(ApiError::conflict(
            "InvalidState",
            format!("cannot upload a dataset while the project is {}", rec.state.as_str()),
        ));
    }
    let project = runnable(&st, &id)?;
    let data = &project.config.data;
    let mut files: Vec<Upload> = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?
    {
        let Some(file_name) = field.file_name().map(str::to_string) else {
            continue;
        };
        let ext = FsPath::new(&file_name)
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if !UPLOAD_EXTENSIONS.contains(&ext.as_str()) {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "UnsupportedFormat",
                format!("`{file_name}`: expected csv, jsonl or zip"),
            ));
        }
        let named = field
            .name()
            .filter(|n| *n == data.train_split || Some(*n) == data.valid_split.as_deref())
            .map(str::to_string);
        let split = match named {
            Some(s) => s,
            None if !files.iter().any(|f| f.split == data.train_split) => data.train_split.clone(),
            None => match &data.valid_split {
                Some(v) if !files.iter().any(|f| &f.split == v) => v.clone(),
                _ => continue,
            },
        };
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        files.push(Upload { split, ext, bytes });
    }
    if files.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "MissingFile", "no file field in the upload"));
    }
    let worker = st.clone();
    let worker_rec = rec.clone();
    let info = tokio::task::spawn_blocking(move || process_upload(&worker, &worker_rec, &project, files))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    st.store.update::<ApiError>(&id, |r| {
        r.dataset = Some(info.clone());
        r.state = ProjectState::DataReady;
        Ok(())
    })?;
    Ok(Json(json!({ "fingerprint": info.fingerprint, "rows": info.rows })))
}

fn hub_dataset(project: &ValidatedProject, base: &FsPath) -> bool {
    let path = &project.config.data.path;
    is_repo_id(path) && !base.join(path).exists()
}

pub async fn start(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<Value>)> {
    let guard = st.guard(&id);
    let _held = guard.lock().await;
    let rec = record(&st, &id)?;
    let project = runnable(&st, &id)?;
    let startable = match rec.state {
        ProjectState::DataReady | ProjectState::Stopped | ProjectState::Failed => true,
        ProjectState::Created => rec.dataset.is_none() && hub_dataset(&project, &st.cfg.base_dir),
        ProjectState::Running | ProjectState::Succeeded => false,
    };
    if !startable {
        return Err(ApiError::conflict(
            "InvalidState",
            format!("cannot start a project that is {}", rec.state.as_str()),
        ));
    }
    if let Err(e) = st.cfg.bindings.resolve(project.spec) {
        return Err(ApiError::new(StatusCode::FAILED_DEPENDENCY, "TrainerUnbound", e.to_string())
            .with("task", project.spec.id.canonical()));
    }
    let mut project = project;
    if let Some(ds) = &rec.dataset {
        project.config.data.path = ds.path.clone();
    }
    let dir = st.project_dir(&rec.name);
    let mut opts = DispatchOptions::new(&dir);
    opts.base_dir = st.cfg.base_dir.clone();
    opts.cache_dir = Some(st.cache_dir());
    opts.fingerprint_hint = rec.dataset.as_ref().map(|d| d.fingerprint.clone());
    opts.resume = rec.state == ProjectState::Stopped && latest_checkpoint(&dir.join("checkpoints")).is_some();
    opts.local_mode = st.cfg.local_mode;
    opts.worker_exe = st.cfg.worker_exe.clone();
    opts.dry_run_adapters = st.cfg.dry_run_adapters;
    opts.bindings = st.cfg.bindings.clone();
    opts.hub_endpoint = st.cfg.hub_endpoint.clone();
    opts.container_runtime = st.cfg.container_runtime.clone();
    opts.stop_grace = st.cfg.stop_grace;
    let backend = project.config.backend;
    let handle = tokio::task::spawn_blocking(move || dispatch(&project, backend, &opts))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| match e {
            DispatchError::BackendUnavailable(_) => ApiError::conflict("BackendUnavailable", e.to_string()),
            other => ApiError::internal(other.to_string()),
        })?;
    if handle.is_dry_run() {
        return Ok((
            StatusCode::ACCEPTED,
            Json(json!({
                "run_id": handle.run_id(),
                "status": handle.status(),
                "command": handle.command(),
            })),
        ));
    }
    st.handles
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(id.clone(), handle.clone());
    st.store.update::<ApiError>(&id, |r| {
        r.state = ProjectState::Running;
        r.run_id = Some(handle.run_id().to_string());
        r.message = None;
        Ok(())
    })?;
    let watcher = st.clone();
    let watched = handle.clone();
    let project_id = id.clone();
    std::thread::spawn(move || {
        watched.wait();
        let guard = watcher.guard(&project_id);
        let _held = guard.blocking_lock();
        watcher.finish_run(&project_id, &watched);
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "run_id": handle.run_id(), "status": handle.status() })),
    ))
}

pub async fn stop_run(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let guard = st.guard(&id);
    let _held = guard.lock().await;
    let rec = record(&st, &id)?;
    if rec.state != ProjectState::Running {
        return Err(ApiError::conflict(
            "InvalidState",
            format!("cannot stop a project that is {}", rec.state.as_str()),
        ));
    }
    match st.handle(&id) {
        Some(handle) => {
            let h = handle.clone();
            let stopped = tokio::task::spawn_blocking(move || stop(&h))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))?;
            match stopped {
                Ok(_) | Err(DispatchError::AlreadyTerminal(_)) => st.finish_run(&id, &handle),
                Err(e) => return Err(ApiError::internal(e.to_string())),
            }
        }
        None => {
            let worker = st.clone();
            let orphan = rec.clone();
            tokio::task::spawn_blocking(move || worker.stop_orphan(&orphan))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))?;
            st.reconcile(&id);
        }
    }
    let rec = record(&st, &id)?;
    Ok(Json(json!({ "id": rec.id, "state": rec.state, "run_id": rec.run_id })))
}

#[derive(Debug, Deserialize)]
pub struct LogQuery {
    cursor: Option<u64>,
    /// Seconds to wait for new events, capped by the server maximum.
    wait: Option<f64>,
}

pub async fn logs(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    query: Result<Query<LogQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let rec = record(&st, &id)?;
    let path = st.project_dir(&rec.name).join(EVENTS_FILE);
    let cursor = q.cursor.unwrap_or(0);
    let max = st.cfg.max_long_poll;
    let wait = q
        .wait
        .filter(|w| w.is_finite() && *w >= 0.0)
        .map_or(max, |w| max.min(std::time::Duration::from_secs_f64(w.min(max.as_secs_f64()))));
    let deadline = Instant::now() + wait;
    loop {
        let (events, next) = match tail(&path, cursor) {
            Ok(x) => x,
            Err(MonitorError::FileMissing(_)) if cursor == 0 => (Vec::new(), 0),
            Err(e @ (MonitorError::InvalidCursor { .. } | MonitorError::FileMissing(_))) => {
                return Err(ApiError::bad_request(e.to_string()).with("error_key_path", "cursor"))
            }
            Err(e) => return Err(ApiError::internal(e.to_string())),
        };
        let state = record(&st, &id)?.state;
        if !events.is_empty() || state != ProjectState::Running || Instant::now() >= deadline {
            return Ok(Json(json!({ "events": events, "cursor": next, "state": state })));
        }
        tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    }
}

fn static_file(st: &AppState, rel: &str) -> Option<(PathBuf, Vec<u8>)> {
    let root = st.cfg.static_dir.as_ref()?;
    let rel = FsPath::new(rel.trim_start_matches('/'));
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    let path = root.join(rel);
    let bytes = fs::read(&path).ok()?;
    Some((path, bytes))
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        _ => "application/octet-stream",
    }
}

pub async fn index(State(st): State<Arc<AppState>>) -> Response {
    match static_file(&st, "index.html") {
        Some((_, bytes)) => ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], bytes).into_response(),
        None => ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], INDEX_HTML).into_response(),
    }
}

pub async fn fallback(State(st): State<Arc<AppState>>, method: Method, uri: Uri) -> Response {
    let path = uri.path();
    if method == Method::GET && !path.starts_with("/api/") {
        if let Some((file, bytes)) = static_file(&st, path) {
            return ([(header::CONTENT_TYPE, content_type(&file))], bytes).into_response();
        }
    }
    ApiError::not_found(format!("no route for {method} {path}")).into_response()
}

pub async fn method_not_allowed(method: Method, uri: Uri) -> Response {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "MethodNotAllowed",
        format!("{method} is not allowed on {}", uri.path()),
    )
    .into_response()
}
