//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{HeadGrads, HeadParams};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("shape mismatch in block {block}: {left} vs {right}")]
pub struct ShapeMismatch {
    pub block: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Probability of dropping each instance of a training bag; 0 disables.
    pub instance_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_epochs: 5,
            total_epochs: 20,
            batch_size: 64,
            instance_dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0 < self.warmup_epochs && self.warmup_epochs < self.total_epochs) {
            return Err(format!(
                "need 0 < warmup_epochs ({}) < total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.instance_dropout) {
            return Err("instance_dropout must lie in [0, 1)".into());
        }
        if !(self.base_lr >= 0.0) {
            return Err("base_lr must be non-negative".into());
        }
        Ok(())
    }
}

/// Learning rate for optimizer step `step` (0-based).
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.total_epochs * steps_per_epoch;
    if step < warmup {
        return cfg.base_lr * (step + 1) as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * cfg.base_lr * (1.0 + (PI * progress).cos())
}

/// First and second moments, congruent with the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: HeadGrads,
    pub v: HeadGrads,
}

impl AdamWState {
    pub fn new(params: &HeadParams) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update over flat parameter blocks.
pub fn adamw_update(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    m: &mut [&mut [f64]],
    v: &mut [&mut [f64]],
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), ShapeMismatch> {
    for (b, ((p, g), (mb, vb))) in params
        .iter()
        .zip(grads)
        .zip(m.iter().zip(v.iter()))
        .enumerate()
    {
        for other in [g.len(), mb.len(), vb.len()] {
            if other != p.len() {
                return Err(ShapeMismatch {
                    block: b,
                    left: p.len(),
                    right: other,
                });
            }
        }
    }
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(ShapeMismatch {
            block: params.len(),
            left: params.len(),
            right: grads.len(),
        });
    }
    let t = step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (mb, vb)) in params.iter_mut().zip(grads).zip(m.iter_mut().zip(v.iter_mut())) {
        for i in 0..p.len() {
            let gi = g[i];
            mb[i] = cfg.beta1 * mb[i] + (1.0 - cfg.beta1) * gi;
            vb[i] = cfg.beta2 * vb[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = mb[i] / bc1;
            let v_hat = vb[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// Advances `state` by one step and updates every learnable tensor.
pub fn adamw_step(
    params: &mut HeadParams,
    grads: &HeadGrads,
    state: &mut AdamWState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), ShapeMismatch> {
    state.step += 1;
    let AdamWState { step, m, v } = state;
    adamw_update(
        &mut params.blocks_mut(),
        &grads.blocks(),
        &mut m.blocks_mut(),
        &mut v.blocks_mut(),
        *step,
        lr,
        cfg,
    )
}
