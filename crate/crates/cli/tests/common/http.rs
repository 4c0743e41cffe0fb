//! In-process HTTP helpers and the project state-machine fuzz.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use proptest::prelude::RngExt;
use proptest::test_runner::{RngAlgorithm, TestRng};
use serde_json::{json, Value};
use tower::ServiceExt;

use trainforge_cli::app::{read_journal, router, AppConfig, AppState, ProjectState, JOURNAL_FILE};
use trainforge_core::dispatch::LocalMode;

use super::corpus;

pub const BOUNDARY: &str = "XtrainforgeBoundaryX";

pub fn app_config(data_dir: &Path) -> AppConfig {
    let mut cfg = AppConfig::new(data_dir);
    cfg.local_mode = LocalMode::InProcess;
    cfg.container_runtime = None;
    cfg.hub_endpoint = None;
    cfg.base_dir = data_dir.to_path_buf();
    cfg.stop_grace = Duration::from_secs(5);
    cfg.max_long_poll = Duration::from_millis(200);
    cfg
}

pub fn app(cfg: AppConfig) -> (Arc<AppState>, Router) {
    let state = AppState::open(cfg).unwrap();
    (state.clone(), router(state))
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    send(app, req.body(body).unwrap()).await
}

pub async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

/// Multipart body with one file part per `(field, file_name, content)`.
pub fn multipart(parts: &[(&str, &str, &str)]) -> Body {
    let mut out = String::new();
    for (field, file, content) in parts {
        out.push_str(&format!(
            "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"{file}\"\r\nContent-Type: application/octet-stream\r\n\r\n{content}\r\n"
        ));
    }
    out.push_str(&format!("--{BOUNDARY}--\r\n"));
    Body::from(out)
}

pub async fn upload(app: &Router, id: &str, parts: &[(&str, &str, &str)]) -> (StatusCode, Value) {
    let req = Request::post(format!("/api/projects/{id}/dataset"))
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(parts))
        .unwrap();
    send(app, req).await
}

pub fn tiny(name: &str, params: &str) -> Value {
    json!({ "config": format!(
        "task: text-classification\nbase_model: none\nproject_name: {name}\ndata:\n  path: data\n  train_split: train\n  column_mapping: {{text_column: text, target_column: label}}\nparams: {{{params}}}\n"
    )})
}

pub async fn wait_state(app: &Router, id: &str, done: impl Fn(&str) -> bool) -> String {
    for _ in 0..600 {
        let (_, v) = call(app, Method::GET, &format!("/api/projects/{id}"), None).await;
        let state = v["state"].as_str().unwrap().to_string();
        if done(&state) {
            return state;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("project {id} never settled");
}

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Create,
    CreateInvalid,
    UploadValid,
    UploadSingleClass,
    UploadBadColumns,
    UploadWrongExt,
    Start,
    Stop,
    Logs,
    Get,
}

const OPS: [Op; 10] = [
    Op::Create,
    Op::CreateInvalid,
    Op::UploadValid,
    Op::UploadSingleClass,
    Op::UploadBadColumns,
    Op::UploadWrongExt,
    Op::Start,
    Op::Stop,
    Op::Logs,
    Op::Get,
];

pub const SEQUENCE_LEN: usize = 10;

/// Seeded random operation sequences against one project each; no request
/// may answer 5xx and the journal must only record declared transitions.
pub async fn state_machine_fuzz(data_dir: &Path, sequences: usize) {
    let (state, app) = app(app_config(data_dir));
    let single_class: String = (0..8).map(|i| format!("{{\"text\":\"w{i}\",\"label\":\"x\"}}\n")).collect();
    let mut rng = TestRng::deterministic_rng(RngAlgorithm::ChaCha);
    let mut requests = 0usize;
    for seq in 0..sequences {
        let name = format!("p{seq}");
        // long runs give stop something to interrupt
        let params = if rng.random_bool(0.3) {
            "epochs: 10000, batch_size: 1, feature_dim: 32"
        } else {
            "epochs: 1, feature_dim: 32"
        };
        let mut id: Option<String> = None;
        for step in 0..SEQUENCE_LEN {
            // mostly open with a create so the rest has a project to act on
            let op = if step == 0 && rng.random_bool(0.9) {
                Op::Create
            } else {
                OPS[rng.random_range(0..OPS.len())]
            };
            let target = id.clone().unwrap_or_else(|| "no-such-project".to_string());
            let (status, body) = match op {
                Op::Create => {
                    let r = call(&app, Method::POST, "/api/projects", Some(tiny(&name, params))).await;
                    if r.0 == StatusCode::CREATED {
                        id = r.1["id"].as_str().map(str::to_string);
                    }
                    r
                }
                Op::CreateInvalid => call(&app, Method::POST, "/api/projects", Some(json!({"config": "task: [unclosed"}))).await,
                Op::UploadValid => upload(&app, &target, &[("train", "train.jsonl", &corpus(16))]).await,
                Op::UploadSingleClass => upload(&app, &target, &[("train", "train.jsonl", &single_class)]).await,
                Op::UploadBadColumns => upload(&app, &target, &[("train", "train.csv", "a,b\n1,2\n")]).await,
                Op::UploadWrongExt => upload(&app, &target, &[("train", "train.parquet", "x")]).await,
                Op::Start => call(&app, Method::POST, &format!("/api/projects/{target}/start"), None).await,
                Op::Stop => call(&app, Method::POST, &format!("/api/projects/{target}/stop"), None).await,
                Op::Logs => {
                    let cursor = if rng.random_bool(0.2) { rng.random_range(1..500u64) } else { 0 };
                    call(&app, Method::GET, &format!("/api/projects/{target}/logs?cursor={cursor}&wait=0"), None).await
                }
                Op::Get => call(&app, Method::GET, &format!("/api/projects/{target}"), None).await,
            };
            requests += 1;
            assert!(
                !status.is_server_error(),
                "sequence {seq}: {op:?} answered {status}: {body}"
            );
        }
        if let Some(id) = id {
            let (_, v) = call(&app, Method::GET, &format!("/api/projects/{id}"), None).await;
            if v["state"] == "running" {
                let (s, body) = call(&app, Method::POST, &format!("/api/projects/{id}/stop"), None).await;
                assert!(!s.is_server_error(), "{body}");
            }
            wait_state(&app, &id, |s| s != "running").await;
        }
    }
    state.shutdown();
    assert!(requests >= sequences * SEQUENCE_LEN);

    let journal = read_journal(&data_dir.join(JOURNAL_FILE)).unwrap();
    let mut last: HashMap<String, ProjectState> = HashMap::new();
    let mut seen = HashSet::new();
    for r in &journal {
        match last.get(&r.id) {
            None => assert_eq!(r.state, ProjectState::Created, "first record of {}", r.id),
            Some(prev) if *prev != r.state => {
                assert!(prev.can_move_to(r.state), "{}: {:?} -> {:?}", r.id, prev, r.state);
                seen.insert((*prev, r.state));
            }
            Some(_) => {}
        }
        last.insert(r.id.clone(), r.state);
    }
    // every edge reachable with local uploads (created -> running needs a
    // hub dataset)
    use ProjectState::*;
    for edge in [
        (Created, DataReady),
        (DataReady, Running),
        (Running, Succeeded),
        (Running, Failed),
        (Running, Stopped),
        (Failed, Running),
        (Stopped, Running),
    ] {
        assert!(seen.contains(&edge), "edge {edge:?} never exercised");
    }
}
