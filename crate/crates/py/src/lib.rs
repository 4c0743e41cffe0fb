//! Python bindings: task registry queries, config canonicalization, the
//! AdamW step and in-process project runs.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trainforge_core::config::{self, load_project, parse_config, process_env};
use trainforge_core::models::TrainerBindings;
use trainforge_core::pipeline::{execute, PipelineOptions};
use trainforge_core::registry::{self, ParamValue};
use trainforge_core::trainer::{AdamWConfig, OptimizerState};

create_exception!(trainforge, ConfigError, PyValueError, "Invalid project config; args are (kind, key_path, message).");

fn config_error(e: config::ConfigError) -> PyErr {
    ConfigError::new_err((e.kind(), e.key_path(), e.to_string()))
}

fn env_or_process(env: Option<HashMap<String, String>>) -> HashMap<String, String> {
    env.unwrap_or_else(process_env)
}

/// Every registered task id, sorted.
#[pyfunction]
fn list_tasks() -> Vec<String> {
    let mut ids: Vec<String> = registry::list_tasks().iter().map(|t| t.id.canonical()).collect();
    ids.sort();
    ids
}

/// Parameter defaults of one task as a dict.
#[pyfunction]
fn task_params<'py>(py: Python<'py>, task: &str) -> PyResult<Bound<'py, PyDict>> {
    let spec = registry::resolve_task(task).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = PyDict::new(py);
    for p in &spec.param_schema {
        match &p.default {
            ParamValue::Bool(b) => out.set_item(p.name, *b)?,
            ParamValue::Int(i) => out.set_item(p.name, *i)?,
            ParamValue::Float(x) => out.set_item(p.name, *x)?,
            ParamValue::Str(s) => out.set_item(p.name, s)?,
        }
    }
    Ok(out)
}

/// Canonical YAML of a config with secrets masked. `env` defaults to the
/// process environment.
#[pyfunction]
#[pyo3(signature = (text, env=None))]
fn canonicalize(text: &str, env: Option<HashMap<String, String>>) -> PyResult<String> {
    let cfg = parse_config(text, &env_or_process(env)).map_err(config_error)?;
    config::validate_config(&cfg).map_err(config_error)?;
    Ok(config::canonicalize(&cfg))
}

/// `(params, m, v, t)` after one update.
type AdamWResult = (Vec<f64>, Vec<f64>, Vec<f64>, u64);

/// One AdamW update; returns `(params, m, v, t)`.
#[pyfunction]
#[pyo3(signature = (params, grads, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0))]
#[allow(clippy::too_many_arguments)]
fn adamw_step(
    mut params: Vec<f64>,
    grads: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> PyResult<AdamWResult> {
    let cfg = AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    };
    let mut state = OptimizerState { m, v, t };
    trainforge_core::trainer::adamw_step(&mut params, &grads, &mut state, &cfg, lr)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((params, state.m, state.v, state.t))
}

/// Runs a project config in this process. Relative data paths resolve
/// against `base_dir` (default: the current directory); outputs go to
/// `base_dir/<project_name>`. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (text, base_dir=None, env=None))]
fn run<'py>(
    py: Python<'py>,
    text: &str,
    base_dir: Option<PathBuf>,
    env: Option<HashMap<String, String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let project = load_project(text, &env_or_process(env)).map_err(config_error)?;
    let base = match base_dir {
        Some(b) => b,
        None => std::env::current_dir().map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
    };
    let project_dir = base.join(&project.config.project_name);
    let report = py
        .detach(|| {
            let bindings = TrainerBindings::new();
            let mut opts = PipelineOptions::new(&project_dir, &bindings, "python");
            opts.base_dir = base.clone();
            execute(&project, &opts).map_err(|e| e.to_string())
        })
        .map_err(PyRuntimeError::new_err)?;
    let a = &report.artifact;
    let out = PyDict::new(py);
    out.set_item("status", a.status.as_str())?;
    out.set_item("global_step", a.global_step)?;
    out.set_item("losses", a.losses.iter().map(|(_, l)| *l).collect::<Vec<f64>>())?;
    out.set_item("fingerprint", &report.fingerprint)?;
    out.set_item("project_dir", project_dir.display().to_string())?;
    out.set_item("artifact_dir", a.dir.display().to_string())?;
    Ok(out)
}

#[pymodule]
fn trainforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add_function(wrap_pyfunction!(list_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(task_params, m)?)?;
    m.add_function(wrap_pyfunction!(canonicalize, m)?)?;
    m.add_function(wrap_pyfunction!(adamw_step, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
