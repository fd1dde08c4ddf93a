//! Finite-difference gradient oracle and a whole-model gradient check.

use crate::error::{Error, Result};
use crate::model::{
    cross_entropy, model_backward, model_forward, Gradients, ModelConfig, ModelParams, TokenBatch,
};
use crate::rng::SeededRng;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Step of the five-point stencil used by [`check_model`].
pub const MODEL_CHECK_STEP: f64 = 1e-3;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn finite(v: f64, at: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!(
            "objective is not finite when perturbing coordinate {at}"
        )))
    }
}

/// Central differences `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every coordinate.
///
/// Each coordinate is perturbed from the same base point, so the result does
/// not depend on evaluation order.
pub fn finite_diff<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("step must be positive, got {h}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let base = theta[i];
        theta[i] = base + h;
        let plus = finite(f(&theta)?, i)?;
        theta[i] = base - h;
        let minus = finite(f(&theta)?, i)?;
        theta[i] = base;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Five-point stencil
/// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`, fourth-order accurate.
///
/// Its truncation error is small enough to allow a step around `1e-3`, where
/// the round-off of a loss of order one is a few `1e-13` per coordinate.
/// At the two-point default step a single ulp of the loss already amounts
/// to `2e-11`, which swamps gradients that are exactly zero.
pub fn finite_diff_five_point<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("step must be positive, got {h}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let base = theta[i];
        let mut at = |offset: f64, theta: &mut Vec<f64>| -> Result<f64> {
            theta[i] = base + offset;
            finite(f(theta)?, i)
        };
        let p2 = at(2.0 * h, &mut theta)?;
        let p1 = at(h, &mut theta)?;
        let m1 = at(-h, &mut theta)?;
        let m2 = at(-2.0 * h, &mut theta)?;
        theta[i] = base;
        grad.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }
    Ok(grad)
}

/// One-sided differences `(f(θ + h eᵢ) − f(θ)) / h`; first-order accurate,
/// used only as a cross-check of [`finite_diff`].
pub fn forward_diff<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("step must be positive, got {h}")));
    }
    let mut theta = params.to_vec();
    let f0 = finite(f(&theta)?, 0)?;
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let base = theta[i];
        theta[i] = base + h;
        let plus = finite(f(&theta)?, i)?;
        theta[i] = base;
        grad.push((plus - f0) / h);
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Flat index (within the group) of the worst relative error.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel: f64,
    pub max_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

/// Fixed random batch used by [`check_model`].
pub fn check_batch(config: &ModelConfig) -> Result<TokenBatch> {
    let mut rng = SeededRng::new(config.seed, 0x6772_6164);
    let batch = 2;
    let n = batch * config.seq_len;
    let tokens = (0..n).map(|_| rng.below(config.vocab)).collect();
    let targets = (0..n).map(|_| Some(rng.below(config.vocab))).collect();
    TokenBatch::new(batch, config.seq_len, tokens, targets)
}

fn batch_loss(config: &ModelConfig, params: &ModelParams, batch: &TokenBatch) -> Result<f64> {
    let pass = model_forward(config, params, &batch.tokens, batch.seq_len)?;
    Ok(cross_entropy(&pass.logits, &batch.targets)?.0)
}

/// Checks `model_backward` against finite differences over every parameter.
pub fn check_model(config: &ModelConfig, tolerance: f64) -> Result<GradCheckReport> {
    check_model_with(config, tolerance, MODEL_CHECK_STEP, |_| {})
}

/// As [`check_model`], but lets the caller tamper with the analytic
/// gradients before comparison (mutation testing).
pub fn check_model_with<F>(
    config: &ModelConfig,
    tolerance: f64,
    h: f64,
    tamper: F,
) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Gradients),
{
    let params = ModelParams::init(config)?;
    if params.param_count() >= 100_000 {
        return Err(Error::contract(format!(
            "{} parameters is too many for a full finite-difference check",
            params.param_count()
        )));
    }
    let batch = check_batch(config)?;
    let pass = model_forward(config, &params, &batch.tokens, batch.seq_len)?;
    let (_, dlogits) = cross_entropy(&pass.logits, &batch.targets)?;
    let mut analytic = model_backward(config, &params, &pass, &dlogits)?;
    tamper(&mut analytic);

    let names: Vec<String> = params.named().into_iter().map(|(n, _, _)| n).collect();
    let analytic_flat: Vec<Vec<f64>> = analytic
        .params
        .named()
        .into_iter()
        .map(|(_, _, t)| t.data().to_vec())
        .collect();

    let mut groups = Vec::with_capacity(names.len());
    for (gi, name) in names.into_iter().enumerate() {
        let base = params.named()[gi].2.data().to_vec();
        let mut probe = params.clone();
        let numeric = finite_diff_five_point(
            |theta| {
                probe.tensors_mut()[gi].data_mut().copy_from_slice(theta);
                batch_loss(config, &probe, &batch)
            },
            &base,
            h,
        )?;
        let mut report = GroupReport {
            name,
            max_rel: 0.0,
            max_abs: 0.0,
            worst_index: 0,
        };
        for (i, (&a, &n)) in analytic_flat[gi].iter().zip(&numeric).enumerate() {
            let rel = relative_error(a, n);
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst_index = i;
            }
            report.max_abs = report.max_abs.max((a - n).abs());
        }
        groups.push(report);
    }
    let max_rel = groups.iter().map(|g| g.max_rel).fold(0.0, f64::max);
    let max_abs = groups.iter().map(|g| g.max_abs).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel,
        max_abs,
        tolerance,
        pass: max_rel < tolerance,
    })
}
