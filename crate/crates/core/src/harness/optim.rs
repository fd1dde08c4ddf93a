//! Warmup-cosine schedule and decoupled-weight-decay Adam.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamKind};
use crate::tensor::Tensor;

use super::train_config::TrainConfig;

/// Linear warmup from 0 to the peak, then a half cosine down to the minimum.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    let (warmup, total) = (config.warmup_steps, config.total_steps);
    if step > total {
        return Err(Error::contract(format!("step {step} beyond total {total}")));
    }
    if step < warmup {
        return Ok(config.peak_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(config.peak_lr);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    let cosine = 0.5 * (1.0 + (PI * progress).cos());
    Ok(config.min_lr + (config.peak_lr - config.min_lr) * cosine)
}

/// Adam moments for every parameter tensor, in [`ModelParams::named`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .named()
            .into_iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Hyper-parameters of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
}

impl AdamW {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            clip_norm: config.clip_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    /// Update applied; carries the pre-clipping global gradient norm.
    Applied { grad_norm: f64, clipped: bool },
    /// Gradients were not finite; parameters and state are untouched.
    Aborted,
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(c);
        }
    }
    norm
}

/// One AdamW update. Raw gradients are clipped by global norm, then fed to
/// bias-corrected moments; weight decay `θ ← θ − lr·wd·θ` applies to matrices
/// only (not to norms or embeddings).
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &mut ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    opt: &AdamW,
) -> Result<StepOutcome> {
    let kinds: Vec<ParamKind> = params.named().into_iter().map(|(_, k, _)| k).collect();
    let mut p = params.tensors_mut();
    let mut g = grads.tensors_mut();
    if p.len() != g.len() || p.len() != state.m.len() || p.len() != state.v.len() {
        return Err(Error::contract("gradient or optimizer layout does not match the parameters"));
    }
    for ((pt, gt), mt) in p.iter().zip(&g).zip(&state.m) {
        if !pt.same_shape(gt) || !pt.same_shape(mt) {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: pt.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
    }
    if g.iter().any(|t| !t.is_finite()) {
        return Ok(StepOutcome::Aborted);
    }
    let grad_norm = clip_global_norm(&mut g, opt.clip_norm);
    let clipped = grad_norm > opt.clip_norm;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (i, (pt, gt)) in p.iter_mut().zip(&g).enumerate() {
        let decay = if kinds[i] == ParamKind::Matrix {
            lr * opt.weight_decay
        } else {
            0.0
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gr), mi), vi) in pt.data_mut().iter_mut().zip(gt.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gr;
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gr * gr;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + opt.eps);
            *w -= decay * *w + lr * update;
        }
    }
    Ok(StepOutcome::Applied { grad_norm, clipped })
}
