//! The optimizer-step loop shared by every gradient-trained reference model.

use std::thread;

use super::checkpoint::{resume_for, save_checkpoint, TrainState};
use super::optim::{adamw_step, sgd_step, AdamWConfig, OptimizerKind, OptimizerState};
use super::schedule::scheduler_lr;
use super::{BatchGrad, EvalSplit, GradientModel, LoopSettings, Outcome, RunContext, TrainerError};
use crate::monitoring::Split;
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub outcome: Outcome,
    pub params: Vec<f64>,
    pub global_step: u64,
    pub losses: Vec<(u64, f64)>,
}

/// `epochs * ceil(n / (batch_size * gradient_accumulation))`.
pub fn total_steps(n: usize, s: &LoopSettings) -> u64 {
    s.epochs * windows_per_epoch(n, s)
}

fn windows_per_epoch(n: usize, s: &LoopSettings) -> u64 {
    n.div_ceil(s.batch_size * s.gradient_accumulation) as u64
}

/// Index ranges splitting `len` items into `world_size` contiguous shards
/// whose sizes differ by at most one.
pub fn shard_bounds(len: usize, world_size: usize) -> Vec<(usize, usize)> {
    (0..world_size)
        .map(|i| (i * len / world_size, (i + 1) * len / world_size))
        .collect()
}

fn micro_batch_grads(model: &dyn GradientModel, params: &[f64], batch: &[usize], world_size: usize) -> Vec<BatchGrad> {
    if world_size == 1 {
        return vec![model.loss_and_grad(params, batch)];
    }
    let shards: Vec<&[usize]> = shard_bounds(batch.len(), world_size)
        .into_iter()
        .map(|(a, b)| &batch[a..b])
        .filter(|s| !s.is_empty())
        .collect();
    // workers run concurrently; results are combined in shard order
    thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| scope.spawn(move || model.loss_and_grad(params, shard)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("shard worker panicked"))
            .collect()
    })
}

/// Weighted mean of loss and gradient over a window of micro-batches.
fn window_grad(
    model: &dyn GradientModel,
    params: &[f64],
    window: &[&[usize]],
    world_size: usize,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut weight = 0.0;
    for mb in window {
        for part in micro_batch_grads(model, params, mb, world_size) {
            if part.weight == 0.0 {
                continue;
            }
            loss += part.loss * part.weight;
            for (g, p) in grad.iter_mut().zip(&part.grad) {
                *g += part.weight * p;
            }
            weight += part.weight;
        }
    }
    if weight > 0.0 {
        for g in &mut grad {
            *g /= weight;
        }
        loss /= weight;
    }
    (loss, grad)
}

fn shuffle_stream(seed: u64, epoch: u64) -> RngStream {
    RngStream::new(seed, &format!("shuffle/epoch-{epoch}"))
}

fn fresh_state(
    model: &dyn GradientModel,
    s: &LoopSettings,
    fingerprint: &str,
    config_digest: &str,
) -> TrainState {
    let mut init = RngStream::new(s.seed, "init");
    let params = model.init_params(&mut init);
    TrainState {
        optimizer: OptimizerState::new(params.len()),
        params,
        global_step: 0,
        total_steps: total_steps(model.num_examples(), s),
        epoch: 0,
        window: 0,
        shuffle: shuffle_stream(s.seed, 0).state(),
        fingerprint: fingerprint.to_string(),
        config_digest: config_digest.to_string(),
    }
}

/// Runs the optimizer loop, emitting a train `loss` and `lr` event per step
/// and validation metrics per epoch.
///
/// Each epoch draws a permutation from its own shuffle stream, cuts it into
/// micro-batches of `batch_size` and groups those into windows of
/// `gradient_accumulation`; one window is one optimizer step. Checkpoints
/// are written every `checkpoint_every` steps, at each epoch end, on stop,
/// and at completion.
pub fn fit(
    model: &dyn GradientModel,
    s: &LoopSettings,
    fingerprint: &str,
    config_digest: &str,
    ctx: &RunContext<'_>,
) -> Result<FitOutput, TrainerError> {
    if s.world_size > s.batch_size {
        return Err(TrainerError::ShardTooSmall {
            batch_size: s.batch_size,
            world_size: s.world_size,
        });
    }
    let n = model.num_examples();
    let ckpt_root = ctx.checkpoint_root();
    let mut state = if ctx.control.resume {
        let st = resume_for(&ckpt_root, fingerprint)?;
        if st.params.len() != model.num_params() {
            return Err(TrainerError::ParamCountMismatch {
                checkpoint: st.params.len(),
                model: model.num_params(),
            });
        }
        ctx.log(&format!("resumed from step {}", st.global_step));
        st
    } else {
        fresh_state(model, s, fingerprint, config_digest)
    };
    let total = total_steps(n, s);
    state.total_steps = total;
    let per_epoch = windows_per_epoch(n, s);
    let adam = AdamWConfig {
        weight_decay: s.weight_decay,
        ..AdamWConfig::default()
    };
    let mut losses = Vec::new();
    let mut last_saved = None;
    let save = |st: &TrainState, last: &mut Option<u64>| -> Result<(), TrainerError> {
        if *last != Some(st.global_step) {
            save_checkpoint(st, &ckpt_root)?;
            *last = Some(st.global_step);
        }
        Ok(())
    };

    while state.epoch < s.epochs {
        let epoch = state.epoch;
        let mut stream = RngStream::restore(&state.shuffle).unwrap_or_else(|| shuffle_stream(s.seed, epoch));
        let perm = stream.permutation(n);
        let micro: Vec<&[usize]> = perm.chunks(s.batch_size).collect();
        let windows: Vec<&[&[usize]]> = micro.chunks(s.gradient_accumulation).collect();

        while state.window < per_epoch {
            if ctx.control.should_stop(state.global_step) {
                save(&state, &mut last_saved)?;
                ctx.log(&format!("stopped at step {}", state.global_step));
                return Ok(FitOutput {
                    outcome: Outcome::Stopped,
                    params: state.params,
                    global_step: state.global_step,
                    losses,
                });
            }
            let window = windows[state.window as usize];
            let (loss, grad) = window_grad(model, &state.params, window, s.world_size);
            let step = state.global_step + 1;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainerError::NonFiniteLoss { step });
            }
            let lr = scheduler_lr(s.scheduler, s.lr, state.global_step, total, s.warmup_steps)?;
            match s.optimizer {
                OptimizerKind::AdamW => adamw_step(&mut state.params, &grad, &mut state.optimizer, &adam, lr)?,
                OptimizerKind::Sgd => sgd_step(&mut state.params, &grad, &mut state.optimizer, s.weight_decay, lr)?,
            }
            state.global_step = step;
            state.window += 1;
            losses.push((step, loss));
            ctx.emit(step, epoch, Split::Train, "loss", loss)?;
            ctx.emit(step, epoch, Split::Train, "lr", lr)?;
            if s.checkpoint_every > 0 && step % s.checkpoint_every == 0 {
                save(&state, &mut last_saved)?;
            }
        }

        if let Some(report) = model.evaluate(&state.params, EvalSplit::Valid)? {
            ctx.emit_report(state.global_step, epoch, Split::Valid, &report)?;
        }
        ctx.log(&format!("epoch {epoch} done at step {}", state.global_step));
        state.epoch += 1;
        state.window = 0;
        state.shuffle = shuffle_stream(s.seed, state.epoch).state();
        save(&state, &mut last_saved)?;
    }
    save(&state, &mut last_saved)?;
    Ok(FitOutput {
        outcome: Outcome::Completed,
        params: state.params,
        global_step: state.global_step,
        losses,
    })
}

/// Norm-based relative error between the analytic gradient and central
/// differences with step `h`, over the given coordinates:
/// `|a - n| / max(|a| + |n|, 1e-12)`.
pub fn gradient_check(model: &dyn GradientModel, params: &[f64], batch: &[usize], coords: &[usize], h: f64) -> f64 {
    let analytic = model.loss_and_grad(params, batch).grad;
    let mut p = params.to_vec();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for &i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let plus = model.loss_and_grad(&p, batch).loss;
        p[i] = orig - h;
        let minus = model.loss_and_grad(&p, batch).loss;
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        diff += (analytic[i] - numeric).powi(2);
        na += analytic[i].powi(2);
        nn += numeric.powi(2);
    }
    diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-12)
}
