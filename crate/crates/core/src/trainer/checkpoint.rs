//! Checkpoints: `checkpoints/step-<k>/state.json`.
//!
//! Floats are written with round-trip precision, so a resumed run continues
//! bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::TrainerError;
use crate::rng::StreamState;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
    /// Optimizer steps taken so far; also the scheduler position.
    pub global_step: u64,
    pub total_steps: u64,
    pub epoch: u64,
    /// Accumulation windows already consumed in `epoch`.
    pub window: u64,
    /// Shuffle stream of `epoch`, captured before its permutation was drawn.
    pub shuffle: StreamState,
    pub fingerprint: String,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    state: TrainState,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step}"))
}

/// Writes `root/step-<k>/state.json` via temp file and rename.
pub fn save_checkpoint(state: &TrainState, root: &Path) -> Result<PathBuf, TrainerError> {
    let dir = step_dir(root, state.global_step);
    fs::create_dir_all(&dir).map_err(TrainerError::io(&dir))?;
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        state: state.clone(),
    };
    let json = serde_json::to_vec(&file).expect("train state serializes");
    let tmp = dir.join(".state.json.tmp");
    fs::write(&tmp, json).map_err(TrainerError::io(&tmp))?;
    let target = dir.join(STATE_FILE);
    fs::rename(&tmp, &target).map_err(TrainerError::io(&target))?;
    Ok(dir)
}

/// Highest-numbered `step-<k>` directory holding a state file.
pub fn latest_checkpoint(root: &Path) -> Option<PathBuf> {
    fs::read_dir(root)
        .ok()?
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let step: u64 = name.strip_prefix("step-")?.parse().ok()?;
            e.path().join(STATE_FILE).is_file().then_some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
        .map(|(_, p)| p)
}

/// Loads a checkpoint. `dir` is either one `step-<k>` directory or the
/// checkpoints root, in which case the latest step is used.
pub fn resume(dir: &Path) -> Result<TrainState, TrainerError> {
    let step_dir = if dir.join(STATE_FILE).is_file() {
        dir.to_path_buf()
    } else {
        latest_checkpoint(dir).ok_or_else(|| TrainerError::CheckpointMissing(dir.to_path_buf()))?
    };
    let path = step_dir.join(STATE_FILE);
    let bytes = fs::read(&path).map_err(TrainerError::io(&path))?;
    let probe: VersionProbe = serde_json::from_slice(&bytes).map_err(|e| TrainerError::CheckpointCorrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(TrainerError::CheckpointVersionMismatch {
            found: probe.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_slice(&bytes).map_err(|e| TrainerError::CheckpointCorrupt {
        path,
        reason: e.to_string(),
    })?;
    Ok(file.state)
}

/// [`resume`] plus the dataset-fingerprint check.
pub fn resume_for(dir: &Path, fingerprint: &str) -> Result<TrainState, TrainerError> {
    let state = resume(dir)?;
    if state.fingerprint != fingerprint {
        return Err(TrainerError::FingerprintMismatch {
            checkpoint: state.fingerprint,
            dataset: fingerprint.to_string(),
        });
    }
    Ok(state)
}
