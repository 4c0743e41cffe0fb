//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Built with `harness = false`; run with
//! `cargo test -p trainforge --test acceptance`.

mod common;
#[path = "../../core/tests/common/mod.rs"]
mod core_common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use common::{events, workspace, BIN, TINY_CONFIG};
use core_common::oracles::{brute_force_stump, files_containing, grad_rel_error, same_stump, GRAD_TOL};
use core_common::{config, dataset, project, rec, rel_close, run, separable_corpus, stub_env, text_classification};
use trainforge_core::config::{canonicalize, parse_config, validate_config};
use trainforge_core::dataset::{
    cache_lookup, cache_store, process_dataset, render_chat_template, ChatMessage, ChatRole, ChatTemplate, RawDataset,
    Record,
};
use trainforge_core::hub::{HubClient, HubRef, RepoKind};
use trainforge_core::mock_hub::MockHub;
use trainforge_core::models::stumps::{boosting_round, negative_gradient, objective_loss};
use trainforge_core::models::{
    best_stump, BoostedStumpModel, Objective, PackSettings, PadSide, SoftmaxTextModel, TinyCausalLM, TrainerBindings,
};
use trainforge_core::monitoring::Split;
use trainforge_core::pipeline::{execute, PipelineOptions};
use trainforge_core::registry::{list_tasks, resolve_task, Modality, ParamValue};
use trainforge_core::rng::RngStream;
use trainforge_core::trainer::{
    adamw_step, latest_checkpoint, resume, AdamWConfig, GradientModel, OptimizerState, RunControl,
};

const TRACE_TOL: f64 = 1e-9;

fn task_census() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let out = common::command(dir.path()).args(["tasks", "list"]).output().unwrap();
    assert!(started.elapsed() < Duration::from_secs(1), "took {:?}", started.elapsed());
    assert_eq!(out.status.code(), Some(0));
    let ids: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(str::to_string).collect();
    assert_eq!(ids.len(), 22, "{ids:?}");
    let mut counts = BTreeMap::new();
    for id in &ids {
        *counts.entry(format!("{:?}", resolve_task(id).unwrap().modality)).or_insert(0) += 1;
    }
    let count = |m: Modality| counts.get(&format!("{m:?}")).copied().unwrap_or(0);
    assert_eq!((count(Modality::Text), count(Modality::Image), count(Modality::Tabular)), (16, 4, 2));
    assert_eq!(list_tasks().len(), 22);
}

fn config_fidelity() {
    let started = Instant::now();
    let cfg = parse_config(core_common::ORPO_LISTING, &stub_env()).unwrap();
    let expected = [
        ("block_size", ParamValue::Int(1024)),
        ("model_max_length", ParamValue::Int(8192)),
        ("max_prompt_length", ParamValue::Int(512)),
        ("epochs", ParamValue::Int(3)),
        ("batch_size", ParamValue::Int(2)),
        ("lr", ParamValue::Float(3e-5)),
        ("peft", ParamValue::Bool(true)),
        ("quantization", ParamValue::Str("int4".into())),
        ("target_modules", ParamValue::Str("all-linear".into())),
        ("padding", ParamValue::Str("right".into())),
        ("optimizer", ParamValue::Str("adamw_torch".into())),
        ("scheduler", ParamValue::Str("linear".into())),
        ("gradient_accumulation", ParamValue::Int(4)),
        ("mixed_precision", ParamValue::Str("fp16".into())),
    ];
    assert_eq!(cfg.params.len(), 14);
    let validated = validate_config(&cfg).unwrap();
    for (k, v) in &expected {
        assert_eq!(cfg.params.get(*k), Some(v), "param {k}");
        assert_eq!(validated.params.get(k), Some(v), "validated param {k}");
    }
    let text = canonicalize(&cfg);
    let back = parse_config(&text, &core_common::env(&[])).unwrap();
    assert_eq!(back, cfg.masked());
    assert_eq!(canonicalize(&back), text);
    assert!(started.elapsed() < Duration::from_secs(1));
}

fn tiny_run(dir: &Path) -> (std::process::Output, Duration) {
    let mut cmd = if Path::new("/usr/bin/taskset").exists() {
        let mut c = Command::new("/usr/bin/taskset");
        c.args(["-c", "0", BIN]);
        c
    } else {
        Command::new(BIN)
    };
    cmd.current_dir(dir)
        .env_remove("HF_TOKEN")
        .env_remove("HUB_ENDPOINT")
        .env("TRAINFORGE_CACHE_DIR", dir.join("cache"))
        .args(["--config", "config.yml"]);
    let started = Instant::now();
    let out = cmd.output().unwrap();
    (out, started.elapsed())
}

fn end_to_end_tiny_run() {
    let ws = workspace(TINY_CONFIG, 200);
    let (out, took) = tiny_run(ws.path());
    assert!(took <= Duration::from_secs(30), "took {took:?}");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = ws.path().join("tiny");
    let meta: Value = serde_json::from_slice(&fs::read(dir.join("artifact/metadata.json")).unwrap()).unwrap();
    let acc = meta["metrics"]["train_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
    assert!(dir.join("events.jsonl").is_file());
    assert!(dir.join("artifact/model.bin").is_file());
    assert!(latest_checkpoint(&dir.join("checkpoints")).is_some());

    let losses = |d: &Path| -> Vec<f64> {
        events(d)
            .iter()
            .filter(|e| e.split == Split::Train && e.name == "loss")
            .map(|e| e.value.as_f64().unwrap())
            .collect()
    };
    let again = workspace(TINY_CONFIG, 200);
    assert_eq!(tiny_run(again.path()).0.status.code(), Some(0));
    let first = losses(&dir);
    assert!(!first.is_empty());
    assert_eq!(first, losses(&again.path().join("tiny")));
}

fn gradient_corpus(rng: &mut RngStream, n: usize) -> Vec<Record> {
    let words = ["red", "green", "blue", "cyan", "plum", "teal", "gold", "gray"];
    (0..n)
        .map(|i| {
            let text: Vec<&str> = (0..1 + rng.below(6)).map(|_| words[rng.below(words.len())]).collect();
            rec(&[("text", json!(text.join(" "))), ("label", json!(["a", "b", "c"][i % 3]))])
        })
        .collect()
}

fn optimizer_oracle() {
    let mut theta = [0.0];
    let mut st = OptimizerState::new(1);
    adamw_step(&mut theta, &[1.0], &mut st, &AdamWConfig::default(), 0.1).unwrap();
    // m_hat = 1, v_hat = 1
    let expected = -0.1 * (1.0 / (1.0f64.sqrt() + 1e-8));
    assert!((theta[0] - expected).abs() <= 1e-12, "{} vs {expected}", theta[0]);

    let p = project(&config("text-classification", "text_column: text, target_column: label", "feature_dim: 16"));
    let settings = PackSettings {
        block_size: 8,
        model_max_length: 64,
        padding: PadSide::Right,
    };
    for seed in 0..20u64 {
        let mut rng = RngStream::new(seed, "acceptance/softmax");
        let data = dataset(&p, gradient_corpus(&mut rng, 12));
        let model = SoftmaxTextModel::from_dataset(&data, &p.params).unwrap();
        let params: Vec<f64> = (0..model.num_params()).map(|_| rng.symmetric(0.5)).collect();
        let batch: Vec<usize> = (0..model.num_examples()).collect();
        let coords: Vec<usize> = (0..model.num_params()).collect();
        let err = grad_rel_error(&model, &params, &batch, &coords);
        assert!(err <= GRAD_TOL, "softmax seed {seed}: {err}");

        let mut rng = RngStream::new(seed, "acceptance/lm");
        let texts: Vec<String> = (0..3)
            .map(|_| (0..3 + rng.below(10)).map(|_| (b'a' + rng.below(4) as u8) as char).collect())
            .collect();
        let dim = 3;
        let model = TinyCausalLM::new(&texts, None, dim, settings).unwrap();
        let params = model.init_params(&mut rng);
        let batch: Vec<usize> = (0..model.num_examples()).collect();
        let mut used: Vec<usize> = model.blocks().iter().flatten().map(|t| *t as usize).collect();
        used.sort_unstable();
        used.dedup();
        let mut coords: Vec<usize> = used.iter().flat_map(|t| t * dim..(t + 1) * dim).collect();
        let u_at = params.len() / 2;
        coords.extend((0..150).map(|_| u_at + rng.below(u_at)));
        let err = grad_rel_error(&model, &params, &batch, &coords);
        assert!(err <= GRAD_TOL, "lm seed {seed}: {err}");
    }
}

fn assert_traces(a: &[(u64, f64)], b: &[(u64, f64)], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: trace lengths");
    for ((sa, la), (sb, lb)) in a.iter().zip(b) {
        assert!(sa == sb && rel_close(*la, *lb, TRACE_TOL), "{what}: step {sa} {la} vs step {sb} {lb}");
    }
}

fn distributed_contract() {
    let started = Instant::now();
    let (p, d) = text_classification(64, "epochs: 2, batch_size: 8, lr: 0.05, feature_dim: 256");
    let dir = tempfile::tempdir().unwrap();
    let single = run(&p, &d, &dir.path().join("single"), RunControl::default()).losses();
    for ws in [1, 2, 4] {
        let control = RunControl {
            world_size: Some(ws),
            ..RunControl::default()
        };
        let par = run(&p, &d, &dir.path().join(format!("ws{ws}")), control).losses();
        assert_traces(&single, &par, &format!("world_size {ws}"));
    }
    assert!(started.elapsed() < Duration::from_secs(10));
}

fn one_step_params(task: &str, mapping: &str, params: &str, train: Vec<Record>) -> Vec<f64> {
    let p = project(&config(task, mapping, params));
    let d = dataset(&p, train);
    let dir = tempfile::tempdir().unwrap();
    let r = run(&p, &d, dir.path(), RunControl::default());
    assert_eq!(r.artifact().global_step, 1);
    let ckpt = latest_checkpoint(&dir.path().join("checkpoints")).unwrap();
    resume(ckpt.parent().unwrap()).unwrap().params
}

fn assert_params_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= TRACE_TOL * x.abs().max(y.abs()).max(1.0), "param {i}: {x} vs {y}");
    }
}

fn accumulation_equivalence() {
    let mapping = "text_column: text, target_column: label";
    let base = "epochs: 1, lr: 0.1, feature_dim: 64";
    let acc = one_step_params(
        "text-classification",
        mapping,
        &format!("{base}, batch_size: 2, gradient_accumulation: 4"),
        separable_corpus(8, 3),
    );
    let large = one_step_params("text-classification", mapping, &format!("{base}, batch_size: 8"), separable_corpus(8, 3));
    assert_params_close(&acc, &large);

    let texts: Vec<Record> = [4, 5, 6, 7, 8, 7, 9, 8]
        .iter()
        .map(|n| rec(&[("text", json!("abcabdabc"[..*n].to_string()))]))
        .collect();
    let base = "epochs: 1, lr: 0.01, block_size: 8, model_max_length: 64, embed_dim: 4";
    let acc = one_step_params(
        "llm:sft",
        "text_column: text",
        &format!("{base}, batch_size: 1, gradient_accumulation: 8"),
        texts.clone(),
    );
    let large = one_step_params("llm:sft", "text_column: text", &format!("{base}, batch_size: 8"), texts);
    assert_params_close(&acc, &large);
}

fn checkpoint_resume() {
    let (p, d) = text_classification(48, "epochs: 2, batch_size: 8, lr: 0.05, feature_dim: 128");
    let dir = tempfile::tempdir().unwrap();
    let full = run(&p, &d, &dir.path().join("full"), RunControl::default()).losses();
    for k in [3u64, 6, 7] {
        let split = dir.path().join(format!("k{k}"));
        let stop = RunControl {
            stop_after_step: Some(k),
            ..RunControl::default()
        };
        assert_eq!(run(&p, &d, &split, stop).artifact().global_step, k);
        let resumed = RunControl {
            resume: true,
            ..RunControl::default()
        };
        let rest: Vec<(u64, f64)> = full.iter().copied().filter(|(s, _)| *s > k).collect();
        assert_traces(&rest, &run(&p, &d, &split, resumed).losses(), &format!("resume at {k}"));
    }
}

fn boosted_stumps() {
    let mut rng = RngStream::new(11, "acceptance/stumps");
    for case in 0..128 {
        let n = 2 + rng.below(49);
        let dims = 1 + rng.below(4);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dims).map(|_| rng.below(7) as f64 - 3.0).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.symmetric(5.0)).collect();
        for objective in [Objective::SquaredError, Objective::Logistic] {
            let y: Vec<f64> = match objective {
                Objective::SquaredError => y.clone(),
                Objective::Logistic => y.iter().map(|v| f64::from(*v > 0.0)).collect(),
            };
            let mut model = BoostedStumpModel::new(objective, &y, 0.1);
            let mut f = vec![model.f0; n];
            for round in 0..10 {
                let oracle = brute_force_stump(&x, &negative_gradient(objective, &y, &f));
                let picked = boosting_round(&mut model, &x, &y, &mut f);
                assert!(same_stump(&picked, &oracle), "case {case} {objective:?} round {round}");
            }
        }
        let mut model = BoostedStumpModel::new(Objective::SquaredError, &y, 0.1);
        let mut f = vec![model.f0; n];
        let mut prev = objective_loss(Objective::SquaredError, &y, &f);
        for _ in 0..100 {
            boosting_round(&mut model, &x, &y, &mut f);
            let loss = objective_loss(Objective::SquaredError, &y, &f);
            assert!(loss <= prev + 1e-12 * prev.max(1.0), "case {case}: {loss} > {prev}");
            prev = loss;
        }
        let r = negative_gradient(Objective::SquaredError, &y, &f);
        assert!(same_stump(&best_stump(&x, &r), &brute_force_stump(&x, &r)));
    }
}

fn dataset_processor() {
    let p = project(
        "task: llm:orpo\nbase_model: none\nproject_name: prefs\ndata:\n  path: prefs\n  train_split: train\n  chat_template: zephyr\n  column_mapping:\n    text_column: chosen\n    rejected_text_column: rejected\n    prompt_text_column: prompt\n",
    );
    let rows: Vec<Record> = (0..20)
        .map(|i| {
            let q = format!("question {i}");
            rec(&[
                ("prompt", json!(q)),
                ("chosen", json!([{"role": "user", "content": q}, {"role": "assistant", "content": "good"}])),
                ("rejected", json!([{"role": "user", "content": q}, {"role": "assistant", "content": "bad"}])),
            ])
        })
        .collect();
    let raw = RawDataset::from_splits(BTreeMap::from([("train".to_string(), rows)]));
    let first = process_dataset(&raw, &p).unwrap();
    for _ in 0..100 {
        assert_eq!(process_dataset(&raw, &p).unwrap().fingerprint, first.fingerprint);
    }
    let cache = tempfile::tempdir().unwrap();
    cache_store(&first, cache.path()).unwrap();
    assert_eq!(cache_lookup(&first.fingerprint, cache.path()).unwrap().as_ref(), Some(&first));

    let user = ChatMessage::new(ChatRole::User, "hi");
    let assistant = ChatMessage::new(ChatRole::Assistant, "hello");
    assert_eq!(
        render_chat_template(ChatTemplate::Zephyr, std::slice::from_ref(&user)).unwrap(),
        "<|user|>\nhi</s>\n<|assistant|>\n"
    );
    assert_eq!(
        render_chat_template(ChatTemplate::Zephyr, &[user, assistant]).unwrap(),
        "<|user|>\nhi</s>\n<|assistant|>\nhello</s>\n"
    );
    assert_eq!(first.train[0]["text_column"], json!("<|user|>\nquestion 0</s>\n<|assistant|>\ngood</s>\n"));
}

fn hub_client() {
    const TOKEN: &str = "hf_acceptance_Zq81";
    let hub = MockHub::start();
    let body: String = separable_corpus(40, 5)
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    hub.add_repo(RepoKind::Dataset, "alice/reviews", &[("train.jsonl", body.as_bytes())]);
    hub.require_token(TOKEN);
    let yaml = "task: text-classification\nbase_model: none\nproject_name: reviews-model\ndata:\n  path: alice/reviews\n  train_split: train\n  column_mapping: {text_column: text, target_column: label}\nparams: {epochs: 1, feature_dim: 128}\nhub:\n  username: ${HF_USERNAME}\n  token: ${HF_TOKEN}\n  push_to_hub: true\n";
    let project =
        trainforge_core::config::load_project(yaml, &core_common::env(&[("HF_USERNAME", "alice"), ("HF_TOKEN", TOKEN)]))
            .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let client = HubClient::new(&hub.endpoint()).with_backoff(vec![Duration::ZERO; 3]);
    let bindings = TrainerBindings::new();
    let mut opts = PipelineOptions::new(&dir.path().join("reviews-model"), &bindings, "run-1");
    opts.base_dir = dir.path().to_path_buf();
    opts.cache_dir = Some(dir.path().join("cache"));
    opts.hub = Some(&client);
    execute(&project, &opts).unwrap();
    assert_eq!(
        hub.files(RepoKind::Model, "alice/reviews-model"),
        ["README.md", "metadata.json", "model.bin"]
    );
    let target = HubRef::new("alice/reviews", RepoKind::Dataset).unwrap();
    let pulls = hub.downloads();
    client.pull(&target, &dir.path().join("again")).unwrap();
    client.pull(&target, &dir.path().join("again")).unwrap();
    assert_eq!(hub.downloads(), pulls + 1);
    let leaks = files_containing(dir.path(), TOKEN.as_bytes());
    assert!(leaks.is_empty(), "token in {leaks:?}");
    for f in ["README.md", "metadata.json", "model.bin"] {
        let bytes = hub.file(RepoKind::Model, "alice/reviews-model", f).unwrap();
        assert!(!bytes.windows(TOKEN.len()).any(|w| w == TOKEN.as_bytes()), "token in pushed {f}");
    }
}

fn api_state_machine() {
    let dir = tempfile::tempdir().unwrap();
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
        .block_on(common::http::state_machine_fuzz(dir.path(), 1000));
}

fn main() {
    let criteria: [(&str, fn()); 11] = [
        ("task census", task_census),
        ("config fidelity", config_fidelity),
        ("end-to-end tiny run", end_to_end_tiny_run),
        ("optimizer oracle", optimizer_oracle),
        ("distributed contract", distributed_contract),
        ("accumulation equivalence", accumulation_equivalence),
        ("checkpoint/resume", checkpoint_resume),
        ("boosted stumps", boosted_stumps),
        ("dataset processor", dataset_processor),
        ("hub client", hub_client),
        ("API state machine", api_state_machine),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(()) => println!("PASS  {name} ({:.2}s)", started.elapsed().as_secs_f64()),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name}: {}", msg.lines().next().unwrap_or(""));
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
