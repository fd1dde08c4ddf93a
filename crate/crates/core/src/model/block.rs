//! One transformer block under every supported normalization wiring.
//!
//! Every wiring decomposes into an attention half and an FFN half:
//!
//! * post-style attention: `A = MHA(in) + X`, `Y = LN₁(A)` where `in` is `X`
//!   (or `LN_embed(X)` in the first SpanNorm block),
//! * pre-style attention: `A = X + out(MHA(s·LN₁(X)))`, `Y = A`,
//! * post FFN: `Z = FFN(Y) + Y`, `X' = LN₂(Z)`,
//! * span FFN: `Z = FFN(Y) + X`, `X' = LN₂(Z)`,
//! * pre-style FFN: `Z = Y + out(FFN(s·LN₂(Y)))`, `X' = Z`,
//!
//! where `out` is the optional Peri-LN output norm and `s` the LN-Scaling
//! factor. `A` and `Z` are the residual sums kept for diagnostics.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::norm::{layer_norm_backward, layer_norm_forward, LnCache};
use crate::tensor::Tensor;

use super::attention::{attention_backward, attention_forward, AttnCache};
use super::config::{ModelConfig, Wiring};
use super::ffn::{ffn_backward, ffn_forward, FfnCache};
use super::params::{BlockParams, NormParams};

#[derive(Clone, Copy, Debug, PartialEq)]
enum AttnHalf {
    Post { embed_norm: bool },
    Pre { scale: f64, out_norm: bool },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum FfnHalf {
    Post,
    Span,
    Pre { scale: f64, out_norm: bool },
}

fn halves(wiring: Wiring) -> (AttnHalf, FfnHalf) {
    let pre = |scale, out_norm| (AttnHalf::Pre { scale, out_norm }, FfnHalf::Pre { scale, out_norm });
    match wiring {
        Wiring::Post => (AttnHalf::Post { embed_norm: false }, FfnHalf::Post),
        Wiring::Span => (AttnHalf::Post { embed_norm: false }, FfnHalf::Span),
        Wiring::SpanFirst => (AttnHalf::Post { embed_norm: true }, FfnHalf::Span),
        Wiring::Hybrid => (
            AttnHalf::Post { embed_norm: false },
            FfnHalf::Pre {
                scale: 1.0,
                out_norm: false,
            },
        ),
        Wiring::Pre => pre(1.0, false),
        Wiring::Peri => pre(1.0, true),
        Wiring::LnScaled { scale } => pre(scale, false),
    }
}

/// Intermediate activations of one block.
#[derive(Clone, Debug)]
pub struct BlockCache {
    pub wiring: Wiring,
    pub seq_len: usize,
    /// Normalized attention input (pre-style norm or first-block embedding norm).
    pub attn_in: Option<(Tensor, LnCache)>,
    pub attn: AttnCache,
    /// Raw MHA output and its Peri-LN output-norm statistics.
    pub attn_raw: Option<(Tensor, LnCache)>,
    /// `A_l`, the residual sum after attention.
    pub attn_sum: Tensor,
    pub ln1: Option<LnCache>,
    /// `Y_l`, the FFN sub-layer's residual-stream input.
    pub y: Tensor,
    pub ffn_in: Option<(Tensor, LnCache)>,
    pub ffn: FfnCache,
    pub ffn_raw: Option<(Tensor, LnCache)>,
    /// `Z_l`, the residual sum after the FFN.
    pub ffn_sum: Tensor,
    pub ln2: Option<LnCache>,
}

fn norm_forward(x: &Tensor, p: &NormParams, scale: f64, eps: f64) -> Result<(Tensor, LnCache)> {
    let (mut y, cache) = layer_norm_forward(x, &p.gain, &p.bias, eps)?;
    if scale != 1.0 {
        y.scale_in_place(scale);
    }
    Ok((y, cache))
}

fn norm_backward(
    grad: &Tensor,
    cache: &LnCache,
    x: &Tensor,
    p: &NormParams,
    scale: f64,
    acc: &mut NormParams,
) -> Result<Tensor> {
    let grad = if scale != 1.0 {
        Cow::Owned(grad.scale(scale))
    } else {
        Cow::Borrowed(grad)
    };
    let (gx, gg, gb) = layer_norm_backward(&grad, cache, x, &p.gain)?;
    acc.gain.add_assign(&gg)?;
    acc.bias.add_assign(&gb)?;
    Ok(gx)
}

fn missing(what: &str) -> Error {
    Error::contract(format!("block parameters lack {what} required by this wiring"))
}

fn check_layer(config: &ModelConfig, layer: usize) -> Result<()> {
    if layer == 0 || layer > config.depth {
        return Err(Error::contract(format!(
            "layer index {layer} outside 1..={}",
            config.depth
        )));
    }
    Ok(())
}

/// Runs block `layer` (1-based) on `x` (`batch * seq_len` rows of width `d`).
pub fn block_forward(
    config: &ModelConfig,
    params: &BlockParams,
    x: &Tensor,
    layer: usize,
    seq_len: usize,
) -> Result<(Tensor, BlockCache)> {
    check_layer(config, layer)?;
    let wiring = config.topology.wiring(layer, config.depth);
    block_forward_wired(config, params, x, wiring, seq_len)
}

/// First SpanNorm block: `Y₁ = LN(MHA(LN(E)) + E)`, `X'₂ = LN(FFN(Y₁) + E)`.
pub fn first_layer_forward_spannorm(
    config: &ModelConfig,
    params: &BlockParams,
    embeddings: &Tensor,
    layer: usize,
    seq_len: usize,
) -> Result<(Tensor, BlockCache)> {
    if layer != 1 || !config.topology.is_spannorm() {
        return Err(Error::contract(format!(
            "the embedding-norm block only exists at layer 1 of a SpanNorm stack (got layer {layer}, {})",
            config.topology
        )));
    }
    block_forward_wired(config, params, embeddings, Wiring::SpanFirst, seq_len)
}

/// Runs a block with an explicit wiring, independent of the config topology.
pub fn block_forward_wired(
    config: &ModelConfig,
    params: &BlockParams,
    x: &Tensor,
    wiring: Wiring,
    seq_len: usize,
) -> Result<(Tensor, BlockCache)> {
    let eps = config.eps;
    let (attn_half, ffn_half) = halves(wiring);

    let (attn_in, attn, attn_raw, attn_sum, ln1, y) = match attn_half {
        AttnHalf::Post { embed_norm } => {
            let attn_in = if embed_norm {
                let p = params.ln_embed.as_ref().ok_or_else(|| missing("ln_embed"))?;
                Some(norm_forward(x, p, 1.0, eps)?)
            } else {
                None
            };
            let input = attn_in.as_ref().map_or(x, |(n, _)| n);
            let (mut sum, attn) = attention_forward(config, params, input, seq_len)?;
            sum.add_assign(x)?;
            let (y, ln1) = norm_forward(&sum, &params.ln1, 1.0, eps)?;
            (attn_in, attn, None, sum, Some(ln1), y)
        }
        AttnHalf::Pre { scale, out_norm } => {
            let normed = norm_forward(x, &params.ln1, scale, eps)?;
            let (m, attn) = attention_forward(config, params, &normed.0, seq_len)?;
            let (branch, attn_raw) = if out_norm {
                let p = params.ln1_out.as_ref().ok_or_else(|| missing("ln1_out"))?;
                let (o, c) = norm_forward(&m, p, 1.0, eps)?;
                (o, Some((m, c)))
            } else {
                (m, None)
            };
            let sum = branch.add(x)?;
            (Some(normed), attn, attn_raw, sum.clone(), None, sum)
        }
    };

    let (ffn_in, ffn, ffn_raw, ffn_sum, ln2, out) = match ffn_half {
        FfnHalf::Post | FfnHalf::Span => {
            let (mut sum, ffn) = ffn_forward(config, params, &y)?;
            sum.add_assign(if ffn_half == FfnHalf::Post { &y } else { x })?;
            let (out, ln2) = norm_forward(&sum, &params.ln2, 1.0, eps)?;
            (None, ffn, None, sum, Some(ln2), out)
        }
        FfnHalf::Pre { scale, out_norm } => {
            let normed = norm_forward(&y, &params.ln2, scale, eps)?;
            let (f, ffn) = ffn_forward(config, params, &normed.0)?;
            let (branch, ffn_raw) = if out_norm {
                let p = params.ln2_out.as_ref().ok_or_else(|| missing("ln2_out"))?;
                let (o, c) = norm_forward(&f, p, 1.0, eps)?;
                (o, Some((f, c)))
            } else {
                (f, None)
            };
            let sum = branch.add(&y)?;
            (Some(normed), ffn, ffn_raw, sum.clone(), None, sum)
        }
    };

    Ok((
        out,
        BlockCache {
            wiring,
            seq_len,
            attn_in,
            attn,
            attn_raw,
            attn_sum,
            ln1,
            y,
            ffn_in,
            ffn,
            ffn_raw,
            ffn_sum,
            ln2,
        },
    ))
}

/// Backward pass of a block. `x` is the block input the cache was built from.
/// Parameter gradients are accumulated into `grads`; returns `∂L/∂x`.
pub fn block_backward(
    config: &ModelConfig,
    params: &BlockParams,
    x: &Tensor,
    cache: &BlockCache,
    grad_out: &Tensor,
    grads: &mut BlockParams,
) -> Result<Tensor> {
    if !grad_out.same_shape(x) || !cache.y.same_shape(x) {
        return Err(Error::contract(format!(
            "block cache does not match input {:?} / gradient {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let (attn_half, ffn_half) = halves(cache.wiring);
    let mut dx = Tensor::zeros(x.shape());

    // FFN half: produce dY.
    let mut dy = match ffn_half {
        FfnHalf::Post | FfnHalf::Span => {
            let ln2 = cache.ln2.as_ref().ok_or_else(|| Error::contract("missing ln2 cache"))?;
            let dz = norm_backward(grad_out, ln2, &cache.ffn_sum, &params.ln2, 1.0, &mut grads.ln2)?;
            let mut dy = ffn_backward(config, params, &cache.y, &cache.ffn, &dz, grads)?;
            if ffn_half == FfnHalf::Post {
                dy.add_assign(&dz)?;
            } else {
                dx.add_assign(&dz)?;
            }
            dy
        }
        FfnHalf::Pre { scale, out_norm } => {
            let (normed, ln2) = cache
                .ffn_in
                .as_ref()
                .ok_or_else(|| Error::contract("missing FFN input-norm cache"))?;
            let df = if out_norm {
                let (raw, c) = cache
                    .ffn_raw
                    .as_ref()
                    .ok_or_else(|| Error::contract("missing FFN output-norm cache"))?;
                let p = params.ln2_out.as_ref().ok_or_else(|| missing("ln2_out"))?;
                let acc = grads.ln2_out.as_mut().ok_or_else(|| missing("ln2_out gradient"))?;
                norm_backward(grad_out, c, raw, p, 1.0, acc)?
            } else {
                grad_out.clone()
            };
            let dn = ffn_backward(config, params, normed, &cache.ffn, &df, grads)?;
            let mut dy = norm_backward(&dn, ln2, &cache.y, &params.ln2, scale, &mut grads.ln2)?;
            dy.add_assign(grad_out)?;
            dy
        }
    };

    // Attention half: consume dY, produce the rest of dX.
    match attn_half {
        AttnHalf::Post { embed_norm } => {
            let ln1 = cache.ln1.as_ref().ok_or_else(|| Error::contract("missing ln1 cache"))?;
            let da = norm_backward(&dy, ln1, &cache.attn_sum, &params.ln1, 1.0, &mut grads.ln1)?;
            dx.add_assign(&da)?;
            let input = cache.attn_in.as_ref().map_or(x, |(n, _)| n);
            let d_in = attention_backward(config, params, input, &cache.attn, &da, grads)?;
            if embed_norm {
                let (_, c) = cache
                    .attn_in
                    .as_ref()
                    .ok_or_else(|| Error::contract("missing embedding-norm cache"))?;
                let p = params.ln_embed.as_ref().ok_or_else(|| missing("ln_embed"))?;
                let acc = grads.ln_embed.as_mut().ok_or_else(|| missing("ln_embed gradient"))?;
                dx.add_assign(&norm_backward(&d_in, c, x, p, 1.0, acc)?)?;
            } else {
                dx.add_assign(&d_in)?;
            }
        }
        AttnHalf::Pre { scale, out_norm } => {
            let (normed, ln1) = cache
                .attn_in
                .as_ref()
                .ok_or_else(|| Error::contract("missing attention input-norm cache"))?;
            dx.add_assign(&dy)?;
            if out_norm {
                let (raw, c) = cache
                    .attn_raw
                    .as_ref()
                    .ok_or_else(|| Error::contract("missing attention output-norm cache"))?;
                let p = params.ln1_out.as_ref().ok_or_else(|| missing("ln1_out"))?;
                let acc = grads.ln1_out.as_mut().ok_or_else(|| missing("ln1_out gradient"))?;
                dy = norm_backward(&dy, c, raw, p, 1.0, acc)?;
            }
            let dn = attention_backward(config, params, normed, &cache.attn, &dy, grads)?;
            dx.add_assign(&norm_backward(&dn, ln1, x, &params.ln1, scale, &mut grads.ln1)?)?;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::NormTopology;
    use crate::rng::SeededRng;

    fn cfg(topology: NormTopology) -> ModelConfig {
        let mut c = ModelConfig::tiny(topology);
        c.eps = 0.0;
        c.depth = 3;
        c
    }

    fn normalized_input(rows: usize, d: usize, seed: u64) -> Tensor {
        let x = SeededRng::new(seed, 0).gaussian_tensor(&[rows, d], 2.0);
        let ones = Tensor::full(&[d], 1.0);
        layer_norm_forward(&x, &ones, &Tensor::zeros(&[d]), 0.0).unwrap().0
    }

    fn block(config: &ModelConfig, layer: usize, seed: u64) -> BlockParams {
        let w = config.topology.wiring(layer, config.depth);
        BlockParams::init(config, w, &mut SeededRng::new(seed, 0)).unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn spannorm_with_zero_branches_is_identity_on_normalized_input() {
        let c = cfg(NormTopology::SpanNorm);
        let mut p = block(&c, 2, 1);
        p.w_o.fill(0.0);
        p.w_2.fill(0.0);
        let x = normalized_input(8, 8, 2);
        let (out, _) = block_forward(&c, &p, &x, 2, 4).unwrap();
        assert!(close(&out, &x, 1e-12));
    }

    #[test]
    fn spannorm_and_postnorm_differ_only_in_second_residual() {
        let c_span = cfg(NormTopology::SpanNorm);
        let c_post = cfg(NormTopology::PostNorm);
        let mut p = block(&c_span, 2, 3);
        p.w_2.fill(0.0);
        let x = SeededRng::new(4, 0).gaussian_tensor(&[8, 8], 1.5);
        let (span, sc) = block_forward(&c_span, &p, &x, 2, 4).unwrap();
        let (post, pc) = block_forward(&c_post, &p, &x, 2, 4).unwrap();
        let ones = Tensor::full(&[8], 1.0);
        let zeros = Tensor::zeros(&[8]);
        // With W_2 = 0: SpanNorm gives LN(X), PostNorm gives LN(Y) = Y.
        let ln_x = layer_norm_forward(&x, &ones, &zeros, 0.0).unwrap().0;
        assert!(close(&span, &ln_x, 1e-12));
        assert!(close(&post, &pc.y, 1e-12));
        assert!(close(&sc.y, &pc.y, 0.0));
        assert!(!close(&span, &post, 1e-3));
    }

    #[test]
    fn prenorm_with_zero_weights_is_exact_identity() {
        let c = cfg(NormTopology::PreNorm);
        let mut p = block(&c, 2, 5);
        for w in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o, &mut p.w_1, &mut p.w_2] {
            w.fill(0.0);
        }
        let x = SeededRng::new(6, 0).gaussian_tensor(&[8, 8], 3.0);
        let (out, _) = block_forward(&c, &p, &x, 2, 4).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_weight_equivalences() {
        let x = SeededRng::new(7, 0).gaussian_tensor(&[8, 8], 2.0);
        let ones = Tensor::full(&[8], 1.0);
        let zeros = Tensor::zeros(&[8]);
        let ln = |t: &Tensor| layer_norm_forward(t, &ones, &zeros, 0.0).unwrap().0;
        for topo in [NormTopology::SpanNorm, NormTopology::PostNorm] {
            let c = cfg(topo);
            let mut p = block(&c, 2, 8);
            for w in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o, &mut p.w_1, &mut p.w_2] {
                w.fill(0.0);
            }
            let (out, _) = block_forward(&c, &p, &x, 2, 4).unwrap();
            let expect = if topo == NormTopology::SpanNorm { ln(&x) } else { ln(&ln(&x)) };
            assert!(close(&out, &expect, 1e-12), "{topo}");
        }
    }

    #[test]
    fn first_spannorm_block_zero_branches_is_embedding_norm() {
        let c = cfg(NormTopology::SpanNorm);
        let mut p = block(&c, 1, 9);
        p.w_o.fill(0.0);
        p.w_2.fill(0.0);
        let e = SeededRng::new(10, 0).gaussian_tensor(&[8, 8], 0.1);
        let (out, _) = first_layer_forward_spannorm(&c, &p, &e, 1, 4).unwrap();
        let ones = Tensor::full(&[8], 1.0);
        let ln_e = layer_norm_forward(&e, &ones, &Tensor::zeros(&[8]), 0.0).unwrap().0;
        assert!(close(&out, &ln_e, 1e-12));
    }

    #[test]
    fn first_spannorm_block_on_normalized_input_matches_generic_block() {
        let c = cfg(NormTopology::SpanNorm);
        let p = block(&c, 1, 11);
        let e = normalized_input(8, 8, 12);
        let (first, _) = first_layer_forward_spannorm(&c, &p, &e, 1, 4).unwrap();
        let (generic, _) = block_forward_wired(&c, &p, &e, Wiring::Span, 4).unwrap();
        assert!(close(&first, &generic, 1e-12));
    }

    #[test]
    fn first_layer_rule_rejects_other_layers() {
        let c = cfg(NormTopology::SpanNorm);
        let p = block(&c, 1, 13);
        let e = normalized_input(4, 8, 14);
        assert!(matches!(
            first_layer_forward_spannorm(&c, &p, &e, 2, 4),
            Err(Error::Contract(_))
        ));
        let pre = cfg(NormTopology::PreNorm);
        assert!(first_layer_forward_spannorm(&pre, &p, &e, 1, 4).is_err());
    }

    #[test]
    fn layer_index_is_checked() {
        let c = cfg(NormTopology::PreNorm);
        let p = block(&c, 1, 15);
        let x = normalized_input(4, 8, 16);
        assert!(block_forward(&c, &p, &x, 0, 4).is_err());
        assert!(block_forward(&c, &p, &x, 4, 4).is_err());
    }

    #[test]
    fn spannorm_output_has_unit_token_variance() {
        let mut c = ModelConfig::tiny(NormTopology::SpanNorm);
        c.depth = 4;
        for layer in 1..=4 {
            let p = block(&c, layer, 20 + layer as u64);
            let x = SeededRng::new(layer as u64, 1).gaussian_tensor(&[8, 8], 5.0);
            let (out, _) = block_forward(&c, &p, &x, layer, 4).unwrap();
            for r in 0..out.rows() {
                let row = out.row(r);
                let m = row.iter().sum::<f64>() / 8.0;
                let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
                assert!(v <= 1.0 && v > 1.0 - 1e-3, "layer {layer} row {r} var {v}");
            }
        }
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        for topo in NormTopology::ALL_DEFAULT {
            let c = ModelConfig::tiny(topo);
            for layer in 1..=2 {
                let p = block(&c, layer, 30 + layer as u64);
                let x = SeededRng::new(31, layer as u64).gaussian_tensor(&[8, 8], 1.0);
                let w = SeededRng::new(32, 0).gaussian_tensor(&[8, 8], 1.0);
                let loss = |x: &Tensor| -> f64 {
                    let (y, _) = block_forward(&c, &p, x, layer, 4).unwrap();
                    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
                };
                let (_, cache) = block_forward(&c, &p, &x, layer, 4).unwrap();
                let mut grads = p.zeros_like();
                let dx = block_backward(&c, &p, &x, &cache, &w, &mut grads).unwrap();
                let h = 1e-5;
                for i in 0..x.len() {
                    let mut xp = x.clone();
                    xp.data_mut()[i] += h;
                    let mut xm = x.clone();
                    xm.data_mut()[i] -= h;
                    let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                    let an = dx.data()[i];
                    let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-5 || (fd - an).abs() < 1e-9, "{topo} layer {layer} coord {i}: {an} vs {fd}");
                }
            }
        }
    }
}
