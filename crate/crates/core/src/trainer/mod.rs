//! Training loop, optimizers, schedules, metrics and checkpoints.
//!
//! A [`Trainer`] turns a validated project plus processed dataset into an
//! artifact. Reference trainers are built on [`GradientModel`] and driven by
//! [`fit`]; external adapters implement [`Trainer`] directly.

pub mod artifact;
pub mod checkpoint;
mod fit;
pub mod metrics;
pub mod optim;
pub mod schedule;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{canonicalize, ValidatedProject};
use crate::dataset::ProcessedDataset;
use crate::monitoring::{MetricEvent, MetricSink, MonitorError, RunLog, RunStatus, Split};
use crate::registry::{TaskId, ValidatedParams};

pub use artifact::{read_model_bin, write_model_bin, ExportedModel, Tensor, METADATA_FILE, MODEL_FILE};
pub use checkpoint::{latest_checkpoint, resume, resume_for, save_checkpoint, TrainState};
pub use fit::{fit, gradient_check, shard_bounds, total_steps, FitOutput};
pub use metrics::{classification_metrics, compute_metrics, regression_metrics, MetricReport, Predictions};
pub use optim::{adamw_step, sgd_step, AdamWConfig, OptimizerKind, OptimizerState};
pub use schedule::{scheduler_lr, SchedulerKind};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("TrainerUnbound: task `{0}` needs an external adapter and none is bound")]
    TrainerUnbound(TaskId),
    #[error("TaskHasReferenceTrainer: task `{0}` is served by a reference trainer")]
    TaskHasReferenceTrainer(TaskId),
    #[error("NonFiniteLoss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("ShardTooSmall: batch_size {batch_size} < world_size {world_size}")]
    ShardTooSmall { batch_size: usize, world_size: usize },
    #[error("CheckpointMissing: no checkpoint under {0}")]
    CheckpointMissing(PathBuf),
    #[error("CheckpointVersionMismatch: found {found}, expected {expected}")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("FingerprintMismatch: checkpoint {checkpoint}, dataset {dataset}")]
    FingerprintMismatch { checkpoint: String, dataset: String },
    #[error("CheckpointCorrupt: {path}: {reason}")]
    CheckpointCorrupt { path: PathBuf, reason: String },
    #[error("ParamCountMismatch: checkpoint has {checkpoint}, model has {model}")]
    ParamCountMismatch { checkpoint: usize, model: usize },
    #[error("SingleClass: classification needs at least two labels")]
    SingleClass,
    #[error("EmptyText at record {record}")]
    EmptyText { record: usize },
    #[error("BlockSizeExceedsMaxLength: block_size {block_size} > model_max_length {model_max_length}")]
    BlockSizeExceedsMaxLength { block_size: usize, model_max_length: usize },
    #[error("NoNumericFeatures")]
    NoNumericFeatures,
    #[error("UnsupportedMulticlass: {classes} classes; boosted stumps are binary")]
    UnsupportedMulticlass { classes: usize },
    #[error("InvalidTarget at record {record}: {reason}")]
    InvalidTarget { record: usize, reason: String },
    #[error("MissingColumn `{column}` at record {record}")]
    MissingColumn { column: String, record: usize },
    #[error("EmptyDataset")]
    EmptyDataset,
    #[error("InvalidSetting: {name} = {value}")]
    InvalidSetting { name: &'static str, value: String },
    #[error("UnknownTask `{0}`")]
    UnknownTask(String),
    #[error("adapter failed: {0}")]
    Adapter(String),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error(transparent)]
    Schedule(#[from] schedule::InvalidStep),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainerError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainerError + '_ {
        move |source| TrainerError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short machine-readable name, the first word of the message.
    pub fn kind(&self) -> String {
        let msg = self.to_string();
        msg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_string()
    }
}

/// Stop requests and test hooks for one run.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    pub stop: Arc<AtomicBool>,
    /// Stop (with a checkpoint) once this many optimizer steps are done.
    pub stop_after_step: Option<u64>,
    /// Continue from the latest checkpoint in the project directory.
    pub resume: bool,
    /// Overrides the `world_size` param.
    pub world_size: Option<usize>,
}

impl RunControl {
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn should_stop(&self, global_step: u64) -> bool {
        self.stop.load(Ordering::SeqCst) || self.stop_after_step.is_some_and(|k| global_step >= k)
    }
}

pub struct RunContext<'a> {
    pub run_id: String,
    pub project_dir: PathBuf,
    pub sink: &'a dyn MetricSink,
    pub log: Option<&'a RunLog>,
    pub control: RunControl,
}

impl<'a> RunContext<'a> {
    pub fn new(run_id: &str, project_dir: &Path, sink: &'a dyn MetricSink) -> Self {
        RunContext {
            run_id: run_id.to_string(),
            project_dir: project_dir.to_path_buf(),
            sink,
            log: None,
            control: RunControl::default(),
        }
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.project_dir.join("artifact")
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        self.project_dir.join("checkpoints")
    }

    pub fn log(&self, msg: &str) {
        if let Some(l) = self.log {
            l.line(msg);
        }
    }

    pub fn emit(&self, step: u64, epoch: u64, split: Split, name: &str, value: f64) -> Result<(), MonitorError> {
        self.sink
            .emit(MetricEvent::scalar(&self.run_id, step, epoch, split, name, value))
    }

    pub fn emit_text(&self, step: u64, epoch: u64, split: Split, name: &str, value: &str) -> Result<(), MonitorError> {
        self.sink
            .emit(MetricEvent::text(&self.run_id, step, epoch, split, name, value))
    }

    pub fn emit_report(&self, step: u64, epoch: u64, split: Split, report: &MetricReport) -> Result<(), MonitorError> {
        for (name, value) in &report.values {
            self.emit(step, epoch, split, name, *value)?;
        }
        for w in &report.warnings {
            self.emit_text(step, epoch, Split::System, "warning", w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Stopped,
}

/// What a trainer hands back; `run_training` turns it into metadata.json.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub outcome: Outcome,
    pub global_step: u64,
    /// `(step, loss)` for every optimizer step taken in this invocation.
    pub losses: Vec<(u64, f64)>,
    pub train_metrics: Option<MetricReport>,
    pub valid_metrics: Option<MetricReport>,
    /// Trainer-specific metadata (label vocabulary, dimensions).
    pub metadata: serde_json::Value,
}

/// Executes one task. Reference trainers and external adapters both
/// implement this; adapters receive the project and dataset unchanged.
pub trait Trainer: Send + Sync {
    fn train(
        &self,
        project: &ValidatedProject,
        data: &ProcessedDataset,
        ctx: &RunContext<'_>,
    ) -> Result<TrainOutput, TrainerError>;
}

#[derive(Debug, Clone)]
pub struct TrainedArtifact {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub global_step: u64,
    pub losses: Vec<(u64, f64)>,
    pub train_metrics: Option<MetricReport>,
    pub valid_metrics: Option<MetricReport>,
}

/// Loop hyperparameters pulled from validated params.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSettings {
    pub epochs: u64,
    pub batch_size: usize,
    pub gradient_accumulation: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub scheduler: SchedulerKind,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub world_size: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl LoopSettings {
    pub fn from_params(p: &ValidatedParams) -> Result<Self, TrainerError> {
        let int = |k: &str, d: i64| p.int(k).unwrap_or(d).max(0) as u64;
        let optimizer = p.str("optimizer").unwrap_or("adamw_torch");
        let scheduler = p.str("scheduler").unwrap_or("linear");
        Ok(LoopSettings {
            epochs: int("epochs", 3),
            batch_size: int("batch_size", 8).max(1) as usize,
            gradient_accumulation: int("gradient_accumulation", 1).max(1) as usize,
            lr: p.float("lr").unwrap_or(5e-5),
            optimizer: OptimizerKind::from_config(optimizer).ok_or_else(|| TrainerError::InvalidSetting {
                name: "optimizer",
                value: optimizer.into(),
            })?,
            scheduler: SchedulerKind::from_config(scheduler).ok_or_else(|| TrainerError::InvalidSetting {
                name: "scheduler",
                value: scheduler.into(),
            })?,
            warmup_steps: int("warmup_steps", 0),
            weight_decay: p.float("weight_decay").unwrap_or(0.0),
            world_size: int("world_size", 1).max(1) as usize,
            checkpoint_every: int("checkpoint_every", 0),
            seed: int("seed", 42),
        })
    }
}

/// Forward/backward over indexed training examples with a flat parameter
/// vector.
pub trait GradientModel: Send + Sync {
    fn num_params(&self) -> usize;
    fn init_params(&self, rng: &mut crate::rng::RngStream) -> Vec<f64>;
    /// Training examples the loop batches over.
    fn num_examples(&self) -> usize;
    /// Mean loss and gradient over `batch`; the weight is the number of loss
    /// terms averaged (examples, or target tokens for language models).
    fn loss_and_grad(&self, params: &[f64], batch: &[usize]) -> BatchGrad;
    fn evaluate(&self, params: &[f64], split: EvalSplit) -> Result<Option<MetricReport>, TrainerError>;
    fn export(&self, params: &[f64]) -> ExportedModel;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Valid,
}

/// SHA-256 of the canonical (secret-masked) config.
pub fn config_digest(project: &ValidatedProject) -> String {
    hex::encode(Sha256::digest(canonicalize(&project.config).as_bytes()))
}

/// Drives a [`GradientModel`] through [`fit`], then evaluates and exports.
pub fn train_gradient_model(
    model: &dyn GradientModel,
    project: &ValidatedProject,
    data: &ProcessedDataset,
    ctx: &RunContext<'_>,
) -> Result<TrainOutput, TrainerError> {
    let mut settings = LoopSettings::from_params(&project.params)?;
    if let Some(ws) = ctx.control.world_size {
        settings.world_size = ws.max(1);
    }
    let out = fit(model, &settings, &data.fingerprint, &config_digest(project), ctx)?;
    if out.outcome == Outcome::Stopped {
        return Ok(TrainOutput {
            outcome: Outcome::Stopped,
            global_step: out.global_step,
            losses: out.losses,
            train_metrics: None,
            valid_metrics: None,
            metadata: serde_json::Value::Null,
        });
    }
    let last_epoch = settings.epochs.saturating_sub(1);
    let train_metrics = model.evaluate(&out.params, EvalSplit::Train)?;
    if let Some(r) = &train_metrics {
        ctx.emit_report(out.global_step, last_epoch, Split::Train, r)?;
    }
    let valid_metrics = model.evaluate(&out.params, EvalSplit::Valid)?;
    let exported = model.export(&out.params);
    let dir = ctx.artifact_dir();
    write_model_bin(&dir, &exported.tensors).map_err(TrainerError::io(&dir))?;
    Ok(TrainOutput {
        outcome: Outcome::Completed,
        global_step: out.global_step,
        losses: out.losses,
        train_metrics,
        valid_metrics,
        metadata: exported.metadata,
    })
}

fn write_metadata(
    project: &ValidatedProject,
    data: &ProcessedDataset,
    out: &TrainOutput,
    dir: &Path,
) -> Result<(), TrainerError> {
    let mut metrics = serde_json::Map::new();
    for (prefix, report) in [("train", &out.train_metrics), ("valid", &out.valid_metrics)] {
        if let Some(r) = report {
            for (k, v) in &r.values {
                metrics.insert(format!("{prefix}_{k}"), json!(v));
            }
        }
    }
    let meta = json!({
        "format_version": artifact::MODEL_FORMAT_VERSION,
        "task": project.spec.id.canonical(),
        "base_model": project.config.base_model,
        "project_name": project.config.project_name,
        "fingerprint": data.fingerprint,
        "schema": data.schema,
        "params": project.params.as_set(),
        "steps": out.global_step,
        "metrics": metrics,
        "model": out.metadata,
    });
    fs::create_dir_all(dir).map_err(TrainerError::io(dir))?;
    let path = dir.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&path, text).map_err(TrainerError::io(&path))
}

/// Runs `trainer` for the project: writes `config.canonical.yml`, emits
/// running and terminal status events, and completes the artifact with
/// `metadata.json`. Errors are recorded as a failed status before returning.
pub fn run_training(
    project: &ValidatedProject,
    data: &ProcessedDataset,
    trainer: &dyn Trainer,
    ctx: &RunContext<'_>,
) -> Result<TrainedArtifact, TrainerError> {
    fs::create_dir_all(&ctx.project_dir).map_err(TrainerError::io(&ctx.project_dir))?;
    let canonical = ctx.project_dir.join("config.canonical.yml");
    fs::write(&canonical, canonicalize(&project.config)).map_err(TrainerError::io(&canonical))?;
    ctx.sink
        .emit(MetricEvent::status(&ctx.run_id, 0, 0, RunStatus::Running))?;
    ctx.log(&format!(
        "run {} started: task {}, {} train records",
        ctx.run_id,
        project.spec.id,
        data.train.len()
    ));

    let result = trainer.train(project, data, ctx).and_then(|out| {
        if out.outcome == Outcome::Completed {
            write_metadata(project, data, &out, &ctx.artifact_dir())?;
        }
        Ok(out)
    });
    match result {
        Ok(out) => {
            let status = match out.outcome {
                Outcome::Completed => RunStatus::Succeeded,
                Outcome::Stopped => RunStatus::Stopped,
            };
            ctx.sink
                .emit(MetricEvent::status(&ctx.run_id, out.global_step, 0, status))?;
            ctx.log(&format!("run {} {} after {} steps", ctx.run_id, status.as_str(), out.global_step));
            Ok(TrainedArtifact {
                dir: ctx.artifact_dir(),
                status,
                global_step: out.global_step,
                losses: out.losses,
                train_metrics: out.train_metrics,
                valid_metrics: out.valid_metrics,
            })
        }
        Err(e) => {
            let step = match &e {
                TrainerError::NonFiniteLoss { step } => *step,
                _ => 0,
            };
            let _ = ctx.emit_text(step, 0, Split::System, "error", &e.to_string());
            let _ = ctx
                .sink
                .emit(MetricEvent::status(&ctx.run_id, step, 0, RunStatus::Failed));
            ctx.log(&format!("run {} failed: {e}", ctx.run_id));
            Err(e)
        }
    }
}

/// [`run_training`] with every micro-batch sharded over `world_size`
/// simulated workers.
pub fn simulate_data_parallel(
    project: &ValidatedProject,
    data: &ProcessedDataset,
    trainer: &dyn Trainer,
    ctx: &mut RunContext<'_>,
    world_size: usize,
) -> Result<TrainedArtifact, TrainerError> {
    ctx.control.world_size = Some(world_size);
    run_training(project, data, trainer, ctx)
}
