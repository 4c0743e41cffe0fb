//! AdamW and plain SGD over flat parameter vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("ShapeMismatch: {params} params, {grads} grads, {moments} moment slots")]
    ShapeMismatch {
        params: usize,
        grads: usize,
        moments: usize,
    },
    #[error("negative learning rate {0}")]
    NegativeLr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl OptimizerKind {
    /// Maps the config names (`adamw_torch`, `sgd`).
    pub fn from_config(name: &str) -> Option<Self> {
        match name {
            "adamw_torch" | "adamw" => Some(OptimizerKind::AdamW),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

/// First/second moments and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

fn check(params: &[f64], grads: &[f64], state: &OptimizerState, lr: f64) -> Result<(), OptimError> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(OptimError::ShapeMismatch {
            params: params.len(),
            grads: grads.len(),
            moments: state.m.len().min(state.v.len()),
        });
    }
    if lr < 0.0 {
        return Err(OptimError::NegativeLr(lr));
    }
    Ok(())
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<(), OptimError> {
    check(params, grads, state, lr)?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

/// `theta -= lr * (g + wd * theta)`; moments stay untouched.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    weight_decay: f64,
    lr: f64,
) -> Result<(), OptimError> {
    check(params, grads, state, lr)?;
    state.t += 1;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + weight_decay * *p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = OptimizerState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &AdamWConfig::default(), 0.1).unwrap();
        assert_eq!(p, [1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_lr_still_updates_moments() {
        let mut p = vec![0.5];
        let mut s = OptimizerState::new(1);
        adamw_step(&mut p, &[2.0], &mut s, &AdamWConfig::default(), 0.0).unwrap();
        assert_eq!(p, [0.5]);
        assert!((s.m[0] - 0.2).abs() < 1e-15);
        assert!((s.v[0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut s = OptimizerState::new(2);
        assert!(matches!(
            adamw_step(&mut p, &[1.0], &mut s, &AdamWConfig::default(), 0.1),
            Err(OptimError::ShapeMismatch { .. })
        ));
        let mut s3 = OptimizerState::new(3);
        assert!(adamw_step(&mut p, &[1.0, 1.0], &mut s3, &AdamWConfig::default(), 0.1).is_err());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient: only the decay term acts
        let mut p = vec![2.0];
        let mut s = OptimizerState::new(1);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut p, &[0.0], &mut s, &cfg, 0.5).unwrap();
        assert!((p[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn sgd_update() {
        let mut p = vec![1.0];
        let mut s = OptimizerState::new(1);
        sgd_step(&mut p, &[0.5], &mut s, 0.0, 0.1).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
    }
}
