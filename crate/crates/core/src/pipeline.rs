//! One project run end to end: dataset preparation, training, publishing.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, ValidatedProject};
use crate::dataset::{
    cache_lookup, cache_store, load_dataset, process_dataset, DatasetError, LoadContext, ProcessedDataset,
};
use crate::hub::{HubClient, HubError, HubRef, RepoKind};
use crate::models::TrainerBindings;
use crate::monitoring::{JsonlSink, MetricEvent, MetricSink, MonitorError, RunLog, RunStatus, Split};
use crate::trainer::{run_training, RunContext, RunControl, TrainedArtifact, TrainerError};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const RUN_LOG_FILE: &str = "run.log";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

impl PipelineError {
    /// Leading error name, e.g. `TrainerUnbound` or `SplitNotFound`.
    pub fn kind(&self) -> String {
        let msg = self.to_string();
        msg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_string()
    }
}

pub struct PipelineOptions<'a> {
    pub project_dir: PathBuf,
    /// Relative data paths resolve against this directory.
    pub base_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub hub: Option<&'a HubClient>,
    pub bindings: &'a TrainerBindings,
    pub run_id: String,
    pub control: RunControl,
    /// Fingerprint of an already processed dataset to take from the cache.
    pub fingerprint_hint: Option<String>,
    /// Mirror run.log lines to stderr.
    pub echo_log: bool,
}

impl<'a> PipelineOptions<'a> {
    pub fn new(project_dir: &Path, bindings: &'a TrainerBindings, run_id: &str) -> Self {
        PipelineOptions {
            project_dir: project_dir.to_path_buf(),
            base_dir: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
            cache_dir: None,
            hub: None,
            bindings,
            run_id: run_id.to_string(),
            control: RunControl::default(),
            fingerprint_hint: None,
            echo_log: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub artifact: TrainedArtifact,
    pub fingerprint: String,
    pub repo_url: Option<String>,
}

/// Loads and processes the project's dataset, reusing the cache entry named
/// by the fingerprint hint when present and storing fresh results.
pub fn prepare_dataset(project: &ValidatedProject, opts: &PipelineOptions<'_>) -> Result<ProcessedDataset, PipelineError> {
    if let (Some(cache), Some(fp)) = (&opts.cache_dir, &opts.fingerprint_hint) {
        match cache_lookup(fp, cache) {
            Ok(Some(ds)) => return Ok(ds),
            // corrupt entries are deleted by the lookup; reprocess
            Ok(None) | Err(DatasetError::CacheCorrupt { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let fallback;
    let hub = match opts.hub {
        Some(h) => h,
        None => {
            fallback = HubClient::from_env();
            &fallback
        }
    };
    let ctx = LoadContext::new(opts.project_dir.join("data"))
        .with_base_dir(&opts.base_dir)
        .with_hub(hub);
    let raw = load_dataset(&project.config.data, &ctx)?;
    let processed = process_dataset(&raw, project)?;
    if let Some(cache) = &opts.cache_dir {
        cache_store(&processed, cache)?;
    }
    Ok(processed)
}

fn fail(sink: &dyn MetricSink, log: &RunLog, run_id: &str, e: &PipelineError) {
    let _ = sink.emit(MetricEvent::text(run_id, 0, 0, Split::System, "error", &e.to_string()));
    let _ = sink.emit(MetricEvent::status(run_id, 0, 0, RunStatus::Failed));
    log.line(&format!("run {run_id} failed: {e}"));
}

/// Runs the project into `opts.project_dir`: events go to `events.jsonl`,
/// human-readable progress to `run.log`. Every failure is recorded as a
/// failed status event before it is returned.
pub fn execute(project: &ValidatedProject, opts: &PipelineOptions<'_>) -> Result<RunReport, PipelineError> {
    let sink = JsonlSink::open(opts.project_dir.join(EVENTS_FILE))?;
    let log = RunLog::open(&opts.project_dir.join(RUN_LOG_FILE), opts.echo_log)?;

    let prepared = opts
        .bindings
        .resolve(project.spec)
        .map_err(PipelineError::from)
        .and_then(|trainer| Ok((trainer, prepare_dataset(project, opts)?)));
    let (trainer, data) = match prepared {
        Ok(p) => p,
        Err(e) => {
            fail(&sink, &log, &opts.run_id, &e);
            return Err(e);
        }
    };
    log.line(&format!("dataset {} ({} rows)", data.fingerprint, data.rows()));

    let mut ctx = RunContext::new(&opts.run_id, &opts.project_dir, &sink);
    ctx.log = Some(&log);
    ctx.control = opts.control.clone();
    let artifact = run_training(project, &data, trainer.as_ref(), &ctx)?;

    let mut repo_url = None;
    if artifact.status == RunStatus::Succeeded && project.config.hub.push_to_hub {
        let pushed = push(project, opts, &artifact.dir);
        match pushed {
            Ok(url) => {
                sink.emit(MetricEvent::text(
                    &opts.run_id,
                    artifact.global_step,
                    0,
                    Split::System,
                    "pushed",
                    &url,
                ))?;
                log.line(&format!("artifact pushed to {url}"));
                repo_url = Some(url);
            }
            Err(e) => {
                // the artifact exists locally but was not delivered; the
                // run ends failed
                let _ = sink.emit(MetricEvent::text(
                    &opts.run_id,
                    artifact.global_step,
                    0,
                    Split::System,
                    "push_error",
                    &e.to_string(),
                ));
                let _ = sink.emit(MetricEvent::status(&opts.run_id, artifact.global_step, 0, RunStatus::Failed));
                log.line(&format!("push failed: {e}"));
                return Err(e);
            }
        }
    }
    Ok(RunReport {
        artifact,
        fingerprint: data.fingerprint,
        repo_url,
    })
}

fn push(project: &ValidatedProject, opts: &PipelineOptions<'_>, artifact_dir: &Path) -> Result<String, PipelineError> {
    let hub_cfg = &project.config.hub;
    let (Some(user), Some(token)) = (&hub_cfg.username, &hub_cfg.token) else {
        return Err(ConfigError::HubCredentialsMissing.into());
    };
    let target = HubRef::new(&format!("{user}/{}", project.config.project_name), RepoKind::Model)?;
    let fallback;
    let hub = match opts.hub {
        Some(h) => h,
        None => {
            fallback = HubClient::from_env();
            &fallback
        }
    };
    Ok(hub.push_artifact(artifact_dir, &target, token)?)
}
