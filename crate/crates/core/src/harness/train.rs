//! The training loop.

use crate::dynamics::PropagationTrace;
use crate::error::Result;
use crate::model::{loss_and_grad, model_forward, ModelConfig, ModelParams, TokenBatch};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::optim::{adamw_step, lr_at, AdamW, OptimizerState, StepOutcome};
use super::tasks::TaskSampler;
use super::train_config::TrainConfig;

/// Smoothing factor of the logged loss average.
pub const EMA_DECAY: f64 = 0.99;

/// Stream id for held-out evaluation batches.
pub const EVAL_STREAM: u64 = 0x6576_616c;

/// One optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    /// 1-based update index.
    pub step: usize,
    /// Loss of the batch the update was computed from.
    pub loss: f64,
    /// Exponential moving average of `loss`, seeded with the first loss.
    pub ema: f64,
    pub lr: f64,
    /// Global gradient norm before clipping; NaN when the step was aborted.
    pub grad_norm: f64,
    /// Gradients were non-finite and the update was skipped.
    pub aborted: bool,
}

impl PartialEq for StepRecord {
    /// Bitwise, so that runs producing NaN compare equal to themselves.
    fn eq(&self, o: &Self) -> bool {
        self.step == o.step
            && self.aborted == o.aborted
            && [self.loss, self.ema, self.lr, self.grad_norm]
                .iter()
                .zip([o.loss, o.ema, o.lr, o.grad_norm])
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    /// `(step, trace)` where `step` counts updates applied before the pass.
    pub traces: Vec<(usize, PropagationTrace)>,
    /// Step whose loss was non-finite; the run stopped there.
    pub diverged_at: Option<usize>,
}

impl RunLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_ema(&self) -> Option<f64> {
        self.records.last().map(|r| r.ema)
    }

    pub fn aborted_steps(&self) -> usize {
        self.records.iter().filter(|r| r.aborted).count()
    }
}

/// Trains from initialization. Divergence is a recorded outcome, not an
/// error: the run stops at the first non-finite loss and the checkpoint
/// holds the parameters at that point.
pub fn train(config: &TrainConfig) -> Result<(RunLog, Checkpoint)> {
    let config = config.with_seed(config.seed);
    config.validate()?;
    let model = &config.model;
    let mut params = ModelParams::init(model)?;
    let mut state = OptimizerState::new(&params);
    let mut sampler = TaskSampler::new(&config)?;
    let opt = AdamW::from_config(&config);
    let mut log = RunLog::default();
    let mut ema = f64::NAN;

    for done in 0..config.total_steps {
        let step = done + 1;
        let batch = sampler.next_batch()?;
        let (loss, mut grads, pass) = loss_and_grad(model, &params, &batch)?;
        let lr = lr_at(step, &config)?;
        ema = if done == 0 { loss } else { EMA_DECAY * ema + (1.0 - EMA_DECAY) * loss };
        if config.trace_every > 0 && done % config.trace_every == 0 {
            log.traces.push((done, PropagationTrace::from_pass(&pass, &grads, loss)));
        }
        drop(pass);
        if !loss.is_finite() {
            log.records.push(StepRecord {
                step,
                loss,
                ema,
                lr,
                grad_norm: f64::NAN,
                aborted: true,
            });
            log.diverged_at = Some(step);
            break;
        }
        let outcome = adamw_step(&mut params, &mut grads.params, &mut state, lr, &opt)?;
        let (grad_norm, aborted) = match outcome {
            StepOutcome::Applied { grad_norm, .. } => (grad_norm, false),
            StepOutcome::Aborted => (f64::NAN, true),
        };
        log.records.push(StepRecord {
            step,
            loss,
            ema,
            lr,
            grad_norm,
            aborted,
        });
    }
    let step = log.records.iter().filter(|r| !r.aborted).count() as u64;
    let checkpoint = Checkpoint {
        data_rng: sampler.rng().state(),
        config,
        params,
        optimizer: Some(state),
        step,
    };
    Ok((log, checkpoint))
}

/// A held-out batch of the run's task, independent of the training stream.
pub fn eval_batch(config: &TrainConfig) -> Result<TokenBatch> {
    let mut sampler = TaskSampler::new(config)?;
    sampler.set_rng(SeededRng::new(config.seed, EVAL_STREAM));
    sampler.next_batch()
}

/// Block outputs `X'_2 … X'_{L+1}` on `batch`.
pub fn block_outputs(model: &ModelConfig, params: &ModelParams, batch: &TokenBatch) -> Result<Vec<Tensor>> {
    let pass = model_forward(model, params, &batch.tokens, batch.seq_len)?;
    Ok(pass.activations.into_iter().skip(1).collect())
}

/// Per-block `‖∂L/∂W_2‖` on `batch`.
pub fn w2_grad_norms(model: &ModelConfig, params: &ModelParams, batch: &TokenBatch) -> Result<Vec<f64>> {
    let (_, grads, _) = loss_and_grad(model, params, batch)?;
    Ok(grads.w2_norms())
}
