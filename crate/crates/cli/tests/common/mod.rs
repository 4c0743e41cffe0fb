#![allow(dead_code)]

pub mod http;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use trainforge_core::monitoring::{tail, MetricEvent};

pub const BIN: &str = env!("CARGO_BIN_EXE_trainforge");

pub const TINY_CONFIG: &str = "task: text-classification
base_model: none
project_name: tiny
log: tensorboard
backend: local
data:
  path: data/train.jsonl
  train_split: train
  column_mapping:
    text_column: text
    target_column: label
params:
  epochs: 2
  batch_size: 8
  lr: 0.05
  feature_dim: 1024
  seed: 7
";

/// Separable two-class corpus as JSONL lines.
pub fn corpus(n: usize) -> String {
    let pos = ["great", "excellent", "wonderful", "superb"];
    let neg = ["awful", "terrible", "horrible", "dreadful"];
    let mut out = String::new();
    for i in 0..n {
        let (words, label) = if i % 2 == 0 { (&pos, "pos") } else { (&neg, "neg") };
        let text = format!("{} {} movie", words[i % 4], words[(i / 2) % 4]);
        out.push_str(&json!({"text": text, "label": label}).to_string());
        out.push('\n');
    }
    out
}

/// Workspace with `config.yml` and `data/train.jsonl`.
pub fn workspace(config: &str, rows: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("data")).unwrap();
    fs::write(dir.path().join("data/train.jsonl"), corpus(rows)).unwrap();
    fs::write(dir.path().join("config.yml"), config).unwrap();
    dir
}

pub fn command(cwd: &Path) -> Command {
    let mut c = Command::new(BIN);
    c.current_dir(cwd)
        .env_remove("HF_TOKEN")
        .env_remove("HF_USERNAME")
        .env_remove("HUB_ENDPOINT")
        .env_remove("TRAINFORGE_API_TOKEN")
        .env("TRAINFORGE_CACHE_DIR", cwd.join("cache"));
    c
}

pub fn run_config(cwd: &Path, extra: &[&str]) -> Output {
    command(cwd)
        .args(["--config", "config.yml"])
        .args(extra)
        .output()
        .unwrap()
}

pub fn events(project_dir: &Path) -> Vec<MetricEvent> {
    tail(&project_dir.join("events.jsonl"), 0).map(|(e, _)| e).unwrap_or_default()
}

/// Events with `ts` and `run_id` blanked, for comparing runs.
pub fn normalized(events: &[MetricEvent]) -> Vec<Value> {
    events
        .iter()
        .map(|e| {
            let mut v = serde_json::to_value(e).unwrap();
            v["ts"] = json!(0);
            v["run_id"] = json!("");
            v
        })
        .collect()
}

/// A running `trainforge app`; killed on drop.
pub struct Server {
    pub child: Child,
    pub base: String,
    pub data_dir: PathBuf,
}

impl Server {
    pub fn start(cwd: &Path, data_dir: &Path, extra_env: &[(&str, &str)]) -> Server {
        let mut cmd = command(cwd);
        cmd.args(["app", "--port", "0", "--data-dir"])
            .arg(data_dir)
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        for (k, v) in extra_env {
            cmd.env(k, v);
        }
        let mut child = cmd.spawn().unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
        Server {
            child,
            base: format!("http://{addr}"),
            data_dir: data_dir.to_path_buf(),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn terminate(&mut self) -> Option<i32> {
        signal(self.child.id(), "TERM");
        let deadline = Instant::now() + Duration::from_secs(20);
        while Instant::now() < deadline {
            if let Ok(Some(status)) = self.child.try_wait() {
                return status.code();
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        let _ = self.child.kill();
        None
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn signal(pid: u32, name: &str) {
    Command::new("kill")
        .args([&format!("-{name}"), &pid.to_string()])
        .status()
        .unwrap();
}

/// Polls until `f` returns `Some` or the timeout passes.
pub fn wait_for<T>(timeout: Duration, mut f: impl FnMut() -> Option<T>) -> Option<T> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(v) = f() {
            return Some(v);
        }
        if Instant::now() > deadline {
            return None;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}
