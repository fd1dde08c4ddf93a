//! Signal-propagation diagnostics: forward variance, backward gradient decay,
//! block Jacobian norms and the depth scaling of the FFN branch.

use crate::error::{Error, Result};
use crate::init::InitStrategy;
use crate::model::{
    block_backward, block_forward_wired, cross_entropy, ffn_forward, model_backward, model_forward,
    BlockParams, ForwardPass, Gradients, ModelConfig, ModelParams, NormTopology, TokenBatch, Wiring,
};
use crate::norm::layer_norm_forward;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Forward step of the finite-difference JVP.
pub const JVP_STEP: f64 = 1e-6;

/// Mean over rows of the per-row population variance.
pub fn token_variance(x: &Tensor) -> f64 {
    let d = x.cols() as f64;
    let rows = x.rows();
    let total: f64 = (0..rows)
        .map(|r| {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d;
            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d
        })
        .sum();
    total / rows as f64
}

/// Random tokens with random next-token targets.
pub fn random_batch(config: &ModelConfig, sequences: usize, seed: u64) -> Result<TokenBatch> {
    let mut rng = SeededRng::new(seed, 0x7472_6163);
    let n = sequences * config.seq_len;
    let tokens = (0..n).map(|_| rng.below(config.vocab)).collect();
    let targets = (0..n).map(|_| Some(rng.below(config.vocab))).collect();
    TokenBatch::new(sequences, config.seq_len, tokens, targets)
}

/// Per-layer forward and backward statistics of one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationTrace {
    /// `Var(X'_l)` for `l = 1..=L+1` (embeddings first).
    pub var: Vec<f64>,
    /// Std of the attention residual sum `A_l`, per block.
    pub sigma_a: Vec<f64>,
    /// Std of the FFN residual sum `Z_l`, per block.
    pub sigma_z: Vec<f64>,
    /// `‖∂L/∂X'_l‖` for `l = 1..=L+1`.
    pub gnorm_act: Vec<f64>,
    /// `‖∂L/∂W_2^{(l)}‖`, per block.
    pub gnorm_w2: Vec<f64>,
    pub loss: f64,
    /// First layer boundary (1-based) with a non-finite value; the vectors
    /// stop before it.
    pub truncated_at: Option<usize>,
}

impl PropagationTrace {
    pub fn depth(&self) -> usize {
        self.var.len().saturating_sub(1)
    }

    /// Geometric mean of the per-block `σ_Z`.
    pub fn mean_sigma_z(&self) -> f64 {
        geometric_mean(&self.sigma_z)
    }

    pub fn mean_sigma_a(&self) -> f64 {
        geometric_mean(&self.sigma_a)
    }
}

fn geometric_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

/// Trace of a model with the given parameters on one batch.
pub fn trace_params(config: &ModelConfig, params: &ModelParams, batch: &TokenBatch) -> Result<PropagationTrace> {
    let pass = model_forward(config, params, &batch.tokens, batch.seq_len)?;
    let (loss, dlogits) = cross_entropy(&pass.logits, &batch.targets)?;
    let grads = model_backward(config, params, &pass, &dlogits)?;
    Ok(PropagationTrace::from_pass(&pass, &grads, loss))
}

impl PropagationTrace {
    /// Statistics of an already computed forward and backward pass.
    pub fn from_pass(pass: &ForwardPass, grads: &Gradients, loss: f64) -> Self {
    let var: Vec<f64> = pass.activations.iter().map(token_variance).collect();
    let sigma_a: Vec<f64> = pass.caches.iter().map(|c| token_variance(&c.attn_sum).sqrt()).collect();
    let sigma_z: Vec<f64> = pass.caches.iter().map(|c| token_variance(&c.ffn_sum).sqrt()).collect();
    let mut trace = PropagationTrace {
        var,
        sigma_a,
        sigma_z,
        gnorm_act: grads.activation_norms(),
        gnorm_w2: grads.w2_norms(),
        loss,
        truncated_at: None,
    };
    let forward_ok = |l: usize| {
        trace.var[l].is_finite()
            && l.checked_sub(1).is_none_or(|b| trace.sigma_a[b].is_finite() && trace.sigma_z[b].is_finite())
    };
    if let Some(l) = (0..trace.var.len()).find(|&l| !forward_ok(l)) {
        // Backward values of a non-finite forward pass carry no information.
        trace.truncated_at = Some(l + 1);
        trace.var.truncate(l);
        trace.sigma_a.truncate(l.saturating_sub(1));
        trace.sigma_z.truncate(l.saturating_sub(1));
        trace.gnorm_act.clear();
        trace.gnorm_w2.clear();
    } else if let Some(l) = (0..trace.gnorm_act.len()).find(|&l| {
        !trace.gnorm_act[l].is_finite() || l.checked_sub(1).is_some_and(|b| !trace.gnorm_w2[b].is_finite())
    }) {
        trace.truncated_at = Some(l + 1);
        trace.gnorm_act.truncate(l);
        trace.gnorm_w2.truncate(l.saturating_sub(1));
    }
    trace
    }
}

/// One forward and backward pass at initialization (parameters drawn from
/// `seed`) on `sequences` random sequences with random targets.
pub fn trace_at_init(config: &ModelConfig, seed: u64, sequences: usize) -> Result<PropagationTrace> {
    let mut config = config.clone();
    config.seed = seed;
    let params = ModelParams::init(&config)?;
    let batch = random_batch(&config, sequences, seed)?;
    trace_params(&config, &params, &batch)
}

/// Uniform per-sub-layer standard deviation, strictly above one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomogeneousSigma(f64);

impl HomogeneousSigma {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma.is_finite() && sigma > 1.0 {
            Ok(Self(sigma))
        } else {
            Err(Error::Domain(format!("homogeneous sigma must exceed 1, got {sigma}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Natural log of the cumulative gradient factor after `depth` blocks:
/// `−2L ln σ` for PostNorm (two norms per block), `−L ln σ` for SpanNorm.
pub fn log_decay_model(sigma: HomogeneousSigma, depth: usize, topology: NormTopology) -> Result<f64> {
    if depth == 0 {
        return Err(Error::contract("depth must be at least 1"));
    }
    let per_norm = -(depth as f64 * sigma.get().ln());
    match topology {
        NormTopology::PostNorm => Ok(2.0 * per_norm),
        NormTopology::SpanNorm => Ok(per_norm),
        other => Err(Error::contract(format!("no closed-form decay model for {other}"))),
    }
}

/// `σ^{−2L}` (PostNorm) or `σ^{−L}` (SpanNorm).
pub fn decay_model(sigma: HomogeneousSigma, depth: usize, topology: NormTopology) -> Result<f64> {
    Ok(log_decay_model(sigma, depth, topology)?.exp())
}

/// Least-squares line through `(x, y)` points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination, clamped to `[0, 1]`; 1 for constant data.
    pub r2: f64,
    pub points: usize,
}

pub fn fit_line(points: &[(f64, f64)]) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "a line needs at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all abscissae coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| {
            let e = p.1 - (intercept + slope * p.0);
            e * e
        })
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(LineFit {
        slope,
        intercept,
        r2,
        points: points.len(),
    })
}

/// Log-linear fit `ln‖G_l‖ ≈ intercept + slope · l`.
pub type DecayFit = LineFit;

/// Fits `ln ‖∂L/∂X'_l‖` against `l` over the finite, positive entries.
pub fn fit_decay(trace: &PropagationTrace) -> Result<DecayFit> {
    fit_log_series(&trace.gnorm_act)
}

/// Log-linear fit of a 1-based series, skipping non-finite or non-positive values.
pub fn fit_log_series(values: &[f64]) -> Result<DecayFit> {
    let points: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite() && **v > 0.0)
        .map(|(i, v)| ((i + 1) as f64, v.ln()))
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "decay fit needs 3 finite entries, got {}",
            points.len()
        )));
    }
    fit_line(&points)
}

/// A map with an analytic vector-Jacobian product.
pub trait DifferentiableMap {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    /// `Jᵀ v` at `x`.
    fn vjp(&self, x: &Tensor, v: &Tensor) -> Result<Tensor>;
}

/// `x ↦ x · M` applied row-wise.
pub struct LinearMap(pub Tensor);

impl DifferentiableMap for LinearMap {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::matmul(x, &self.0)
    }

    fn vjp(&self, _x: &Tensor, v: &Tensor) -> Result<Tensor> {
        crate::tensor::matmul_nt(v, &self.0)
    }
}

/// One transformer block with fixed parameters and wiring.
pub struct BlockMap<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a BlockParams,
    pub wiring: Wiring,
    pub seq_len: usize,
}

impl DifferentiableMap for BlockMap<'_> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(block_forward_wired(self.config, self.params, x, self.wiring, self.seq_len)?.0)
    }

    fn vjp(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (_, cache) = block_forward_wired(self.config, self.params, x, self.wiring, self.seq_len)?;
        let mut scratch = self.params.zeros_like();
        block_backward(self.config, self.params, x, &cache, v, &mut scratch)
    }
}

/// `x ↦ f(x) − x`, whose Jacobian is `J − I`.
pub struct MinusIdentity<M>(pub M);

impl<M: DifferentiableMap> DifferentiableMap for MinusIdentity<M> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.0.apply(x)?;
        for (a, b) in y.data_mut().iter_mut().zip(x.data()) {
            *a -= b;
        }
        Ok(y)
    }

    fn vjp(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let mut g = self.0.vjp(x, v)?;
        for (a, b) in g.data_mut().iter_mut().zip(v.data()) {
            *a -= b;
        }
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralNormEstimate {
    /// Largest `‖J v‖` over the unit iterates.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Relative change below which the power iteration stops.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// Largest singular value of the Jacobian of `map` at `x`, by power iteration
/// on `JᵀJ`; `J v` by forward differences, `Jᵀ u` by the analytic VJP.
pub fn jacobian_spectral_norm<M: DifferentiableMap + ?Sized>(
    map: &M,
    x: &Tensor,
    max_iterations: usize,
    seed: u64,
) -> Result<SpectralNormEstimate> {
    if max_iterations == 0 {
        return Err(Error::contract("power iteration needs at least one step"));
    }
    let fx = map.apply(x)?;
    let mut v = SeededRng::new(seed, 0x6a73_7065).gaussian_tensor(x.shape(), 1.0);
    v.scale_in_place(1.0 / v.norm());
    let mut best: f64 = 0.0;
    let mut previous = f64::NAN;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        let mut probe = x.clone();
        for (p, d) in probe.data_mut().iter_mut().zip(v.data()) {
            *p += JVP_STEP * d;
        }
        let mut jv = map.apply(&probe)?;
        for (a, b) in jv.data_mut().iter_mut().zip(fx.data()) {
            *a = (*a - b) / JVP_STEP;
        }
        let estimate = jv.norm();
        if !estimate.is_finite() {
            return Err(Error::Numeric("Jacobian-vector product is not finite".into()));
        }
        best = best.max(estimate);
        if (estimate - previous).abs() <= POWER_TOLERANCE * estimate.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        previous = estimate;
        let next = map.vjp(x, &jv)?;
        let n = next.norm();
        if n == 0.0 || !n.is_finite() {
            // J v = 0 (or Jᵀ J v = 0): the estimate cannot improve.
            converged = true;
            break;
        }
        v = next.scale(1.0 / n);
    }
    Ok(SpectralNormEstimate {
        value: best,
        converged,
        iterations,
    })
}

/// `Var(FFN(LN(x)))` of one block's FFN on a normalized input.
pub fn ffn_branch_variance(config: &ModelConfig, params: &BlockParams, x: &Tensor) -> Result<f64> {
    let d = config.d_model;
    let (normed, _) = layer_norm_forward(x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), config.eps)?;
    let (out, _) = ffn_forward(config, params, &normed)?;
    Ok(token_variance(&out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report {
    pub depths: Vec<usize>,
    /// Mean over seeds of the branch variance, per depth.
    pub variances: Vec<f64>,
    /// Log-log fit of variance against depth.
    pub fit: LineFit,
}

/// Measures `Var(FFN(LN x))` at initialization for each depth and fits the
/// log-log slope. `family` fixes everything but the depth; `scaled` selects
/// depth-scaled or global initialization with `family`'s base std.
pub fn theorem1_check(
    family: &ModelConfig,
    depths: &[usize],
    seeds: &[u64],
    tokens: usize,
    scaled: bool,
) -> Result<Theorem1Report> {
    if seeds.is_empty() || tokens == 0 {
        return Err(Error::contract("theorem check needs seeds and tokens"));
    }
    let base = family.init.base_std;
    let mut variances = Vec::with_capacity(depths.len());
    for &depth in depths {
        let mut config = family.clone();
        config.depth = depth;
        config.init = if scaled {
            InitStrategy::scaled(base, depth)
        } else {
            InitStrategy::global(base)
        };
        config.validate()?;
        let mut total = 0.0;
        for &seed in seeds {
            let mut rng = SeededRng::new(seed, 0x7468_6d31 ^ ((depth as u64) << 32));
            let params = BlockParams::init(&config, Wiring::Pre, &mut rng)?;
            let x = rng.gaussian_tensor(&[tokens, config.d_model], 1.0);
            total += ffn_branch_variance(&config, &params, &x)?;
        }
        variances.push(total / seeds.len() as f64);
    }
    let points: Vec<(f64, f64)> = depths
        .iter()
        .zip(&variances)
        .map(|(&l, &v)| ((l as f64).ln(), v.ln()))
        .collect();
    let fit = fit_line(&points)?;
    Ok(Theorem1Report {
        depths: depths.to_vec(),
        variances,
        fit,
    })
}

/// `Var(x + branch) − (1 + Var(branch))`: zero when the branch is
/// uncorrelated with a unit-variance `x`.
pub fn variance_sum_residual(x: &Tensor, branch: &Tensor) -> Result<f64> {
    let sum = x.add(branch)?;
    Ok(token_variance(&sum) - (1.0 + token_variance(branch)))
}

/// Variance-sum residual of a SpanNorm block's second residual,
/// `Z = FFN(Y) + X`, on input `x`.
pub fn variance_sum_check(config: &ModelConfig, params: &BlockParams, x: &Tensor, seq_len: usize) -> Result<f64> {
    let (_, cache) = block_forward_wired(config, params, x, Wiring::Span, seq_len)?;
    let mut branch = cache.ffn_sum.clone();
    for (b, v) in branch.data_mut().iter_mut().zip(x.data()) {
        *b -= v;
    }
    variance_sum_residual(x, &branch)
}

/// `‖J_l − I‖` of block `l` (1-based) at initialization, evaluated on the
/// block's actual input for one random sequence.
pub fn identity_deviation(
    config: &ModelConfig,
    params: &ModelParams,
    tokens: &[usize],
    layers: &[usize],
    iterations: usize,
    seed: u64,
) -> Result<Vec<SpectralNormEstimate>> {
    let seq_len = tokens.len();
    let pass = model_forward(config, params, tokens, seq_len)?;
    layers
        .iter()
        .map(|&l| {
            if l == 0 || l > config.depth {
                return Err(Error::contract(format!("layer {l} outside 1..={}", config.depth)));
            }
            let map = MinusIdentity(BlockMap {
                config,
                params: &params.blocks[l - 1],
                wiring: config.topology.wiring(l, config.depth),
                seq_len,
            });
            jacobian_spectral_norm(&map, &pass.activations[l - 1], iterations, seed)
        })
        .collect()
}
