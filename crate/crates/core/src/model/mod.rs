//! Decoder-only transformer stack: embeddings, blocks, optional final norm
//! and a weight-tied output head.

pub mod attention;
pub mod block;
pub mod config;
pub mod ffn;
pub mod params;

use crate::error::{Error, Result};
use crate::norm::{layer_norm_backward, layer_norm_forward, LnCache};
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, Tensor};

pub use attention::{attention_backward, attention_forward, AttnCache};
pub use block::{
    block_backward, block_forward, block_forward_wired, first_layer_forward_spannorm, BlockCache,
};
pub use config::{Activation, ModelConfig, NormTopology, Wiring};
pub use ffn::{ffn_backward, ffn_forward, FfnCache};
pub use params::{wiring_plan, BlockParams, ModelParams, NormParams, ParamKind};

/// A batch of equal-length token sequences with optional next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// `batch * seq_len` token ids, sequence-major.
    pub tokens: Vec<usize>,
    /// Target id per position; `None` positions do not enter the loss.
    pub targets: Vec<Option<usize>>,
}

impl TokenBatch {
    pub fn new(
        batch: usize,
        seq_len: usize,
        tokens: Vec<usize>,
        targets: Vec<Option<usize>>,
    ) -> Result<Self> {
        if batch == 0 || seq_len == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if tokens.len() != batch * seq_len || targets.len() != tokens.len() {
            return Err(Error::Input(format!(
                "batch {batch}x{seq_len} needs {} tokens and targets, got {} and {}",
                batch * seq_len,
                tokens.len(),
                targets.len()
            )));
        }
        Ok(Self {
            batch,
            seq_len,
            tokens,
            targets,
        })
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Everything the forward pass produced.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `X'_1` (embeddings) through `X'_{L+1}` (last block output).
    pub activations: Vec<Tensor>,
    pub caches: Vec<BlockCache>,
    pub final_norm: Option<LnCache>,
    /// Input to the output head (final-normed when the stack needs it).
    pub head_input: Tensor,
    pub logits: Tensor,
    pub tokens: Vec<usize>,
    pub seq_len: usize,
}

/// Parameter gradients plus `∂L/∂X'_l` for every layer boundary.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ModelParams,
    /// Same indexing as [`ForwardPass::activations`].
    pub activations: Vec<Tensor>,
}

impl Gradients {
    /// Frobenius norm of `∂L/∂X'_l`, `l = 1..=L+1`.
    pub fn activation_norms(&self) -> Vec<f64> {
        self.activations.iter().map(Tensor::norm).collect()
    }

    /// Frobenius norm of each block's `W_2` gradient.
    pub fn w2_norms(&self) -> Vec<f64> {
        self.params.blocks.iter().map(|b| b.w_2.norm()).collect()
    }
}

pub fn embed(config: &ModelConfig, params: &ModelParams, tokens: &[usize], seq_len: usize) -> Result<Tensor> {
    if seq_len == 0 || seq_len > config.seq_len {
        return Err(Error::Input(format!(
            "sequence length {seq_len} outside 1..={}",
            config.seq_len
        )));
    }
    if tokens.is_empty() || tokens.len() % seq_len != 0 {
        return Err(Error::Input(format!(
            "{} tokens do not form whole sequences of length {seq_len}",
            tokens.len()
        )));
    }
    let d = config.d_model;
    let mut e = Tensor::zeros(&[tokens.len(), d]);
    for (r, &tok) in tokens.iter().enumerate() {
        if tok >= config.vocab {
            return Err(Error::Input(format!(
                "token id {tok} out of range for vocab {}",
                config.vocab
            )));
        }
        let row = e.row_mut(r);
        let te = params.tok_emb.row(tok);
        let pe = params.pos_emb.row(r % seq_len);
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }
    Ok(e)
}

/// Embedding → blocks → optional final norm → tied head.
pub fn model_forward(
    config: &ModelConfig,
    params: &ModelParams,
    tokens: &[usize],
    seq_len: usize,
) -> Result<ForwardPass> {
    config.validate()?;
    if params.blocks.len() != config.depth {
        return Err(Error::contract(format!(
            "{} parameter blocks for depth {}",
            params.blocks.len(),
            config.depth
        )));
    }
    let mut activations = Vec::with_capacity(config.depth + 1);
    activations.push(embed(config, params, tokens, seq_len)?);
    let mut caches = Vec::with_capacity(config.depth);
    for (i, bp) in params.blocks.iter().enumerate() {
        let (out, cache) = block_forward(config, bp, &activations[i], i + 1, seq_len)?;
        activations.push(out);
        caches.push(cache);
    }
    let last = activations.last().expect("at least the embeddings");
    let (head_input, final_norm) = match &params.final_norm {
        Some(n) => {
            let (h, c) = layer_norm_forward(last, &n.gain, &n.bias, config.eps)?;
            (h, Some(c))
        }
        None => (last.clone(), None),
    };
    let logits = matmul_nt(&head_input, &params.tok_emb)?;
    Ok(ForwardPass {
        activations,
        caches,
        final_norm,
        head_input,
        logits,
        tokens: tokens.to_vec(),
        seq_len,
    })
}

/// Mean cross-entropy over targeted rows, and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, targets: &[Option<usize>]) -> Result<(f64, Tensor)> {
    let (rows, vocab) = logits.dims2("cross_entropy")?;
    if targets.len() != rows {
        return Err(Error::Input(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::Input("batch has no target positions".into()));
    }
    let mut grad = Tensor::zeros(&[rows, vocab]);
    let mut loss = 0.0;
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        if t >= vocab {
            return Err(Error::Input(format!("target {t} out of range for vocab {vocab}")));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[t];
        let g = grad.row_mut(r);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - max).exp() / z / count as f64;
        }
        g[t] -= 1.0 / count as f64;
    }
    Ok((loss / count as f64, grad))
}

/// Exact backward pass through the whole stack.
pub fn model_backward(
    config: &ModelConfig,
    params: &ModelParams,
    pass: &ForwardPass,
    grad_logits: &Tensor,
) -> Result<Gradients> {
    if pass.caches.len() != params.blocks.len()
        || pass.activations.len() != params.blocks.len() + 1
        || !grad_logits.same_shape(&pass.logits)
    {
        return Err(Error::contract("forward caches do not match the model"));
    }
    let mut grads = params.zeros_like();
    matmul_tn_acc(grad_logits, &pass.head_input, &mut grads.tok_emb)?;
    let d_head = matmul(grad_logits, &params.tok_emb)?;
    let last = pass.activations.last().expect("non-empty");
    let mut dx = match (&params.final_norm, &pass.final_norm) {
        (Some(n), Some(c)) => {
            let (dx, gg, gb) = layer_norm_backward(&d_head, c, last, &n.gain)?;
            let acc = grads.final_norm.as_mut().expect("zeros_like keeps layout");
            acc.gain.add_assign(&gg)?;
            acc.bias.add_assign(&gb)?;
            dx
        }
        (None, None) => d_head,
        _ => return Err(Error::contract("final-norm cache does not match the parameters")),
    };

    let depth = params.blocks.len();
    let mut act_grads = vec![Tensor::zeros(&[0]); depth + 1];
    for l in (0..depth).rev() {
        let input = &pass.activations[l];
        let next = block_backward(
            config,
            &params.blocks[l],
            input,
            &pass.caches[l],
            &dx,
            &mut grads.blocks[l],
        )?;
        act_grads[l + 1] = std::mem::replace(&mut dx, next);
    }

    // Scatter into the embedding tables.
    let d = config.d_model;
    for (r, &tok) in pass.tokens.iter().enumerate() {
        let g = dx.row(r);
        let pos = r % pass.seq_len;
        for j in 0..d {
            grads.tok_emb.row_mut(tok)[j] += g[j];
            grads.pos_emb.row_mut(pos)[j] += g[j];
        }
    }
    act_grads[0] = dx;
    Ok(Gradients {
        params: grads,
        activations: act_grads,
    })
}

/// Forward, cross-entropy and backward in one call.
pub fn loss_and_grad(
    config: &ModelConfig,
    params: &ModelParams,
    batch: &TokenBatch,
) -> Result<(f64, Gradients, ForwardPass)> {
    let pass = model_forward(config, params, &batch.tokens, batch.seq_len)?;
    let (loss, dlogits) = cross_entropy(&pass.logits, &batch.targets)?;
    let grads = model_backward(config, params, &pass, &dlogits)?;
    Ok((loss, grads, pass))
}

/// Loss only, without keeping gradients.
pub fn loss(config: &ModelConfig, params: &ModelParams, batch: &TokenBatch) -> Result<f64> {
    let pass = model_forward(config, params, &batch.tokens, batch.seq_len)?;
    Ok(cross_entropy(&pass.logits, &batch.targets)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_batch(config: &ModelConfig, batch: usize, seed: u64) -> TokenBatch {
        let mut rng = SeededRng::new(seed, 9);
        let n = batch * config.seq_len;
        let tokens = (0..n).map(|_| rng.below(config.vocab)).collect();
        let targets = (0..n).map(|_| Some(rng.below(config.vocab))).collect();
        TokenBatch::new(batch, config.seq_len, tokens, targets).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros(&[3, 11]);
        let (l, _) = cross_entropy(&logits, &[Some(0), Some(5), Some(10)]).unwrap();
        assert!((l - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let cfg = ModelConfig::tiny(NormTopology::SpanNorm);
        let p = ModelParams::init(&cfg).unwrap();
        assert!(matches!(
            model_forward(&cfg, &p, &[0, 1, 2, 11], 4),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_depth_rejected_at_config_time() {
        let mut cfg = ModelConfig::tiny(NormTopology::SpanNorm);
        cfg.depth = 0;
        assert!(matches!(ModelParams::init(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn single_layer_spannorm_runs_first_block_then_head() {
        let mut cfg = ModelConfig::tiny(NormTopology::SpanNorm);
        cfg.depth = 1;
        let p = ModelParams::init(&cfg).unwrap();
        assert!(p.final_norm.is_none());
        let tokens = vec![1, 2, 3, 4];
        let pass = model_forward(&cfg, &p, &tokens, 4).unwrap();
        let e = embed(&cfg, &p, &tokens, 4).unwrap();
        let (x2, _) = first_layer_forward_spannorm(&cfg, &p.blocks[0], &e, 1, 4).unwrap();
        let logits = matmul_nt(&x2, &p.tok_emb).unwrap();
        assert_eq!(pass.logits, logits);
        assert_eq!(pass.caches[0].wiring, Wiring::SpanFirst);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_grads() {
        let cfg = ModelConfig::tiny(NormTopology::PreNorm);
        let p = ModelParams::init(&cfg).unwrap();
        let b = random_batch(&cfg, 2, 1);
        let pass = model_forward(&cfg, &p, &b.tokens, b.seq_len).unwrap();
        let g = model_backward(&cfg, &p, &pass, &Tensor::zeros(pass.logits.shape())).unwrap();
        assert_eq!(g.params.global_norm(), 0.0);
        assert!(g.activation_norms().iter().all(|&n| n == 0.0));
    }

    #[test]
    fn doubling_the_loss_doubles_every_gradient() {
        let cfg = ModelConfig::tiny(NormTopology::HybridNorm);
        let p = ModelParams::init(&cfg).unwrap();
        let b = random_batch(&cfg, 2, 2);
        let pass = model_forward(&cfg, &p, &b.tokens, b.seq_len).unwrap();
        let (_, dl) = cross_entropy(&pass.logits, &b.targets).unwrap();
        let g1 = model_backward(&cfg, &p, &pass, &dl).unwrap();
        let g2 = model_backward(&cfg, &p, &pass, &dl.scale(2.0)).unwrap();
        for ((_, _, a), (_, _, b)) in g1.params.named().iter().zip(g2.params.named().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        for topo in NormTopology::ALL_DEFAULT {
            let mut cfg = ModelConfig::tiny(topo);
            cfg.seq_len = 6;
            let p = ModelParams::init(&cfg).unwrap();
            let a = vec![1, 2, 3, 4, 5, 6];
            let mut b = a.clone();
            b[4] = 9;
            b[5] = 0;
            let la = model_forward(&cfg, &p, &a, 6).unwrap().logits;
            let lb = model_forward(&cfg, &p, &b, 6).unwrap().logits;
            for r in 0..4 {
                assert_eq!(la.row(r), lb.row(r), "{topo} row {r}");
            }
            assert_ne!(la.row(4), lb.row(4));
        }
    }
}
