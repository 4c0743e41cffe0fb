//! Learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("InvalidStep: step {step} outside [0, {total}]")]
pub struct InvalidStep {
    pub step: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Constant,
    Linear,
    Cosine,
}

impl SchedulerKind {
    pub fn from_config(name: &str) -> Option<Self> {
        match name {
            "constant" => Some(SchedulerKind::Constant),
            "linear" => Some(SchedulerKind::Linear),
            "cosine" => Some(SchedulerKind::Cosine),
            _ => None,
        }
    }
}

/// Learning rate for optimizer step `step` (0-based) of `total_steps`.
///
/// Warmup ramps linearly from 0 to `base_lr` over `warmup_steps`; after it
/// the decay runs over the remaining `total_steps - warmup_steps` steps.
/// With no warmup, linear is `base * (1 - step/total)` and cosine is
/// `base * 0.5 * (1 + cos(pi * step/total))`.
pub fn scheduler_lr(
    kind: SchedulerKind,
    base_lr: f64,
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
) -> Result<f64, InvalidStep> {
    if step > total_steps {
        return Err(InvalidStep {
            step,
            total: total_steps,
        });
    }
    if kind == SchedulerKind::Constant {
        return Ok(base_lr);
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = total_steps.saturating_sub(warmup_steps);
    let progress = if span == 0 {
        1.0
    } else {
        (step - warmup_steps) as f64 / span as f64
    };
    Ok(match kind {
        SchedulerKind::Linear => base_lr * (1.0 - progress).max(0.0),
        SchedulerKind::Cosine => base_lr * 0.5 * (1.0 + (PI * progress).cos()),
        SchedulerKind::Constant => unreachable!(),
    })
}
