//! Sweep drivers. Cells are independent training runs with isolated state;
//! they run concurrently and results come back sorted by cell key.

use std::thread;

use crate::error::Result;

use super::train::{eval_batch, train, w2_grad_norms, RunLog};
use super::train_config::TrainConfig;

/// Runs `f` over `cells` on up to `available_parallelism` threads; output
/// order follows `cells`.
pub fn run_cells<C, T, F>(cells: &[C], f: F) -> Result<Vec<T>>
where
    C: Sync,
    T: Send,
    F: Fn(&C) -> Result<T> + Sync,
{
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(cells.len()).max(1);
    let mut slots: Vec<Option<Result<T>>> = (0..cells.len()).map(|_| None).collect();
    thread::scope(|s| {
        let f = &f;
        let chunks: Vec<_> = slots
            .chunks_mut(cells.len().div_ceil(workers).max(1))
            .zip(cells.chunks(cells.len().div_ceil(workers).max(1)))
            .map(|(out, input)| {
                s.spawn(move || {
                    for (o, c) in out.iter_mut().zip(input) {
                        *o = Some(f(c));
                    }
                })
            })
            .collect();
        for h in chunks {
            h.join().expect("sweep worker panicked");
        }
    });
    slots.into_iter().map(|s| s.expect("every cell ran")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRow {
    pub depth: usize,
    pub initial_loss: f64,
    pub final_ema: f64,
    pub diverged_at: Option<usize>,
}

/// One run per depth, sharing every other setting (lr, data, seed). The
/// block init follows the depth when it is depth-scaled.
pub fn depth_stress(base: &TrainConfig, depths: &[usize]) -> Result<Vec<DepthRow>> {
    let mut depths = depths.to_vec();
    depths.sort_unstable();
    depths.dedup();
    run_cells(&depths, |&depth| {
        let mut c = base.clone();
        c.model = c.model.with_depth(depth);
        let (log, _) = train(&c)?;
        Ok(depth_row(depth, &log))
    })
}

fn depth_row(depth: usize, log: &RunLog) -> DepthRow {
    DepthRow {
        depth,
        initial_loss: log.initial_loss().unwrap_or(f64::NAN),
        final_ema: log.final_ema().unwrap_or(f64::NAN),
        diverged_at: log.diverged_at,
    }
}

/// Final smoothed losses strictly decrease with depth and no run diverged.
pub fn strictly_improves_with_depth(rows: &[DepthRow]) -> bool {
    rows.iter().all(|r| r.diverged_at.is_none() && r.final_ema.is_finite())
        && rows.windows(2).all(|w| w[1].final_ema < w[0].final_ema)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradProfile {
    pub lr: f64,
    /// `‖∂L/∂W_2‖` per block after the step budget, on a held-out batch.
    pub w2_norms: Vec<f64>,
    pub final_ema: f64,
    pub diverged_at: Option<usize>,
}

impl GradProfile {
    /// Largest over smallest per-layer norm (NaN if any norm is not finite).
    pub fn balance_ratio(&self) -> f64 {
        if self.w2_norms.iter().any(|v| !v.is_finite()) {
            return f64::NAN;
        }
        let max = self.w2_norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.w2_norms.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// Trains the same model and data at each peak lr (the minimum lr keeps its
/// ratio to the peak) and reports the per-layer `W_2` gradient profile.
pub fn lr_sweep_gradprofile(base: &TrainConfig, lrs: &[f64]) -> Result<Vec<GradProfile>> {
    let mut lrs = lrs.to_vec();
    lrs.sort_by(f64::total_cmp);
    let ratio = base.min_lr / base.peak_lr;
    run_cells(&lrs, |&lr| {
        let mut c = base.clone();
        c.peak_lr = lr;
        c.min_lr = lr * ratio;
        let (log, ckpt) = train(&c)?;
        let batch = eval_batch(&ckpt.config)?;
        let w2_norms = w2_grad_norms(&ckpt.config.model, &ckpt.params, &batch)?;
        Ok(GradProfile {
            lr,
            w2_norms,
            final_ema: log.final_ema().unwrap_or(f64::NAN),
            diverged_at: log.diverged_at,
        })
    })
}
