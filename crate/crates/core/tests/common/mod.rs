#![allow(dead_code)]

pub mod oracles;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde_json::{json, Value};
use trainforge_core::config::{load_project, ValidatedProject};
use trainforge_core::dataset::{process_dataset, ProcessedDataset, RawDataset, Record};
use trainforge_core::models::reference_trainer;
use trainforge_core::monitoring::{MemorySink, MetricEvent};
use trainforge_core::trainer::{run_training, RunContext, RunControl, TrainedArtifact, TrainerError};

/// The llm:orpo example config, byte for byte.
pub const ORPO_LISTING: &str = "task: llm:orpo
base_model: meta-llama/Meta-Llama-3.1-8B
project_name: autotrain-llama
log: tensorboard
backend: local

data:
  path: HuggingFaceH4/no_robots
  train_split: train
  valid_split: null
  chat_template: zephyr
  column_mapping:
    text_column: chosen
    rejected_text_column: rejected
    prompt_text_column: prompt

params:
  block_size: 1024
  model_max_length: 8192
  max_prompt_length: 512
  epochs: 3
  batch_size: 2
  lr: 3e-5
  peft: true
  quantization: int4
  target_modules: all-linear
  padding: right
  optimizer: adamw_torch
  scheduler: linear
  gradient_accumulation: 4
  mixed_precision: fp16

hub:
  username: ${HF_USERNAME}
  token: ${HF_TOKEN}
  push_to_hub: true
";

pub fn env(pairs: &[(&str, &str)]) -> HashMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

pub fn stub_env() -> HashMap<String, String> {
    env(&[("HF_USERNAME", "alice"), ("HF_TOKEN", "hf_stub_token")])
}

pub fn project(yaml: &str) -> ValidatedProject {
    load_project(yaml, &HashMap::new()).unwrap_or_else(|e| panic!("config rejected: {e}"))
}

/// Config for `task` reading split `train` with the given column mapping
/// and params (YAML flow-mapping bodies).
pub fn config(task: &str, mapping: &str, params: &str) -> String {
    format!(
        "task: {task}\nbase_model: none\nproject_name: test-project\ndata:\n  path: data\n  train_split: train\n  column_mapping: {{{mapping}}}\nparams: {{{params}}}\n"
    )
}

pub fn rec(pairs: &[(&str, Value)]) -> Record {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Linearly separable two-class corpus: each class draws words from its own
/// vocabulary.
pub fn separable_corpus(n: usize, seed: u64) -> Vec<Record> {
    let pos = ["great", "excellent", "wonderful", "superb", "lovely", "brilliant"];
    let neg = ["awful", "terrible", "horrible", "dreadful", "poor", "boring"];
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move |m: usize| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) % m as u64) as usize
    };
    (0..n)
        .map(|i| {
            let (words, label) = if i % 2 == 0 { (&pos, "pos") } else { (&neg, "neg") };
            let text: Vec<&str> = (0..4).map(|_| words[next(words.len())]).collect();
            rec(&[("text", json!(text.join(" "))), ("label", json!(label))])
        })
        .collect()
}

pub fn dataset(project: &ValidatedProject, train: Vec<Record>) -> ProcessedDataset {
    let raw = RawDataset::from_splits(BTreeMap::from([("train".to_string(), train)]));
    process_dataset(&raw, project).expect("dataset processes")
}

pub fn text_classification(n: usize, params: &str) -> (ValidatedProject, ProcessedDataset) {
    let p = project(&config(
        "text-classification",
        "text_column: text, target_column: label",
        params,
    ));
    let d = dataset(&p, separable_corpus(n, 7));
    (p, d)
}

pub struct Run {
    pub result: Result<TrainedArtifact, TrainerError>,
    pub events: Vec<MetricEvent>,
}

impl Run {
    pub fn artifact(&self) -> &TrainedArtifact {
        self.result.as_ref().expect("run succeeds")
    }

    /// `(step, loss)` of every optimizer step of this invocation.
    pub fn losses(&self) -> Vec<(u64, f64)> {
        self.artifact().losses.clone()
    }
}

pub fn run(project: &ValidatedProject, data: &ProcessedDataset, dir: &Path, control: RunControl) -> Run {
    let trainer = reference_trainer(&project.spec.id).expect("reference task");
    let sink = MemorySink::new();
    let mut ctx = RunContext::new("run-test", dir, &sink);
    ctx.control = control;
    let result = run_training(project, data, trainer.as_ref(), &ctx);
    Run {
        result,
        events: sink.events(),
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
