//! Causal multi-head softmax attention over a batch of equal-length sequences.

use crate::error::{Error, Result};
use crate::norm::{layer_norm_backward, layer_norm_forward, LnCache};
use crate::tensor::{gemm_view, matmul, matmul_nt, matmul_tn_acc, Tensor, View};

use super::config::ModelConfig;
use super::params::{BlockParams, NormParams};

#[derive(Clone, Debug)]
pub struct AttnCache {
    /// Queries, keys and values as consumed by the score computation.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Raw projections and norm statistics when QKV-Norm is active.
    pub qkv_raw: Option<Box<[(Tensor, LnCache); 3]>>,
    /// Softmax weights, `[batch, heads, t, t]`, zero above the diagonal.
    pub probs: Vec<f64>,
    /// Concatenated head outputs before `W_O`.
    pub heads: Tensor,
    pub seq_len: usize,
}

/// Applies a norm independently to every head slice of a `[rows, d]` tensor.
fn head_norm(x: &Tensor, norm: &NormParams, dh: usize, eps: f64) -> Result<(Tensor, LnCache)> {
    let shape = x.shape().to_vec();
    let per_head = x.clone().reshape(&[x.len() / dh, dh])?;
    let (y, cache) = layer_norm_forward(&per_head, &norm.gain, &norm.bias, eps)?;
    Ok((y.reshape(&shape)?, cache))
}

fn head_norm_backward(
    grad: &Tensor,
    cache: &LnCache,
    x: &Tensor,
    norm: &NormParams,
    dh: usize,
    acc: &mut NormParams,
) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let rows = x.len() / dh;
    let g = grad.clone().reshape(&[rows, dh])?;
    let xr = x.clone().reshape(&[rows, dh])?;
    let (gx, gg, gb) = layer_norm_backward(&g, cache, &xr, &norm.gain)?;
    acc.gain.add_assign(&gg)?;
    acc.bias.add_assign(&gb)?;
    gx.reshape(&shape)
}

fn check_input(config: &ModelConfig, x: &Tensor, seq_len: usize) -> Result<usize> {
    let d = config.d_model;
    if x.shape().len() != 2 || x.cols() != d {
        return Err(Error::Dimension {
            op: "attention",
            lhs: x.shape().to_vec(),
            rhs: vec![d],
        });
    }
    if seq_len == 0 || seq_len > config.seq_len {
        return Err(Error::contract(format!(
            "sequence length {seq_len} exceeds the configured maximum {}",
            config.seq_len
        )));
    }
    if x.rows() % seq_len != 0 {
        return Err(Error::contract(format!(
            "{} rows do not split into sequences of length {seq_len}",
            x.rows()
        )));
    }
    Ok(x.rows() / seq_len)
}

/// `softmax(QKᵀ/√dₕ + causal mask) V` per head, then `· W_O`.
///
/// `x` holds `batch * seq_len` token rows; tokens only attend within their
/// own sequence and to positions at or before their own.
pub fn attention_forward(
    config: &ModelConfig,
    params: &BlockParams,
    x: &Tensor,
    seq_len: usize,
) -> Result<(Tensor, AttnCache)> {
    let batch = check_input(config, x, seq_len)?;
    let (d, h, dh, t) = (config.d_model, config.n_heads, config.head_dim(), seq_len);
    let mut q = matmul(x, &params.w_q)?;
    let mut k = matmul(x, &params.w_k)?;
    let mut v = matmul(x, &params.w_v)?;
    let qkv_raw = match &params.qkv_norm {
        Some([nq, nk, nv]) => {
            let (q2, cq) = head_norm(&q, nq, dh, config.eps)?;
            let (k2, ck) = head_norm(&k, nk, dh, config.eps)?;
            let (v2, cv) = head_norm(&v, nv, dh, config.eps)?;
            let raw = [
                (std::mem::replace(&mut q, q2), cq),
                (std::mem::replace(&mut k, k2), ck),
                (std::mem::replace(&mut v, v2), cv),
            ];
            Some(Box::new(raw))
        }
        None => None,
    };

    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; batch * h * t * t];
    let mut heads = Tensor::zeros(&[batch * t, d]);
    for b in 0..batch {
        for hd in 0..h {
            let base = b * t * d + hd * dh;
            let p_off = (b * h + hd) * t * t;
            let head_view = View::rows(base, d);
            gemm_view(
                t,
                dh,
                t,
                q.data(),
                head_view,
                k.data(),
                head_view.t(),
                0.0,
                &mut probs,
                View::rows(p_off, t),
            );
            for i in 0..t {
                let row = &mut probs[p_off + i * t..p_off + (i + 1) * t];
                let max = row[..=i]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                let mut sum = 0.0;
                for s in &mut row[..=i] {
                    *s = (*s * scale - max).exp();
                    sum += *s;
                }
                for s in &mut row[..=i] {
                    *s /= sum;
                }
                row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
            }
            gemm_view(
                t,
                t,
                dh,
                &probs,
                View::rows(p_off, t),
                v.data(),
                head_view,
                0.0,
                heads.data_mut(),
                head_view,
            );
        }
    }
    let out = matmul(&heads, &params.w_o)?;
    Ok((
        out,
        AttnCache {
            q,
            k,
            v,
            qkv_raw,
            probs,
            heads,
            seq_len,
        },
    ))
}

/// Backward pass of [`attention_forward`]. Accumulates parameter gradients
/// into `grads` and returns the gradient with respect to `x`.
pub fn attention_backward(
    config: &ModelConfig,
    params: &BlockParams,
    x: &Tensor,
    cache: &AttnCache,
    grad_out: &Tensor,
    grads: &mut BlockParams,
) -> Result<Tensor> {
    let t = cache.seq_len;
    let batch = check_input(config, x, t)?;
    let (d, h, dh) = (config.d_model, config.n_heads, config.head_dim());
    if !grad_out.same_shape(x) || cache.probs.len() != batch * h * t * t {
        return Err(Error::contract("attention cache does not match the input"));
    }
    matmul_tn_acc(&cache.heads, grad_out, &mut grads.w_o)?;
    let d_heads = matmul_nt(grad_out, &params.w_o)?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[batch * t, d]);
    let mut dk = Tensor::zeros(&[batch * t, d]);
    let mut dv = Tensor::zeros(&[batch * t, d]);
    let mut dp = vec![0.0; t * t];
    for b in 0..batch {
        for hd in 0..h {
            let base = b * t * d + hd * dh;
            let p_off = (b * h + hd) * t * t;
            let head_view = View::rows(base, d);
            let p_view = View::rows(p_off, t);
            // dP = dO · Vᵀ
            gemm_view(
                t,
                dh,
                t,
                d_heads.data(),
                head_view,
                cache.v.data(),
                head_view.t(),
                0.0,
                &mut dp,
                View::rows(0, t),
            );
            // dV = Pᵀ · dO
            gemm_view(
                t,
                t,
                dh,
                &cache.probs,
                p_view.t(),
                d_heads.data(),
                head_view,
                0.0,
                dv.data_mut(),
                head_view,
            );
            // softmax backward, folded with the score scale
            for i in 0..t {
                let p = &cache.probs[p_off + i * t..p_off + (i + 1) * t];
                let g = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = p[..=i].iter().zip(&g[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    g[j] = p[j] * (g[j] - dot) * scale;
                }
                g[i + 1..].iter_mut().for_each(|s| *s = 0.0);
            }
            // dQ = dS · K,  dK = dSᵀ · Q
            gemm_view(
                t,
                t,
                dh,
                &dp,
                View::rows(0, t),
                cache.k.data(),
                head_view,
                0.0,
                dq.data_mut(),
                head_view,
            );
            gemm_view(
                t,
                t,
                dh,
                &dp,
                View::rows(0, t).t(),
                cache.q.data(),
                head_view,
                0.0,
                dk.data_mut(),
                head_view,
            );
        }
    }

    if let (Some(raw), Some(norms)) = (&cache.qkv_raw, &params.qkv_norm) {
        let acc = grads
            .qkv_norm
            .as_mut()
            .ok_or_else(|| Error::contract("gradient buffer lacks QKV norms"))?;
        let [(rq, cq), (rk, ck), (rv, cv)] = raw.as_ref();
        let [aq, ak, av] = acc;
        dq = head_norm_backward(&dq, cq, rq, &norms[0], dh, aq)?;
        dk = head_norm_backward(&dk, ck, rk, &norms[1], dh, ak)?;
        dv = head_norm_backward(&dv, cv, rv, &norms[2], dh, av)?;
    }

    matmul_tn_acc(x, &dq, &mut grads.w_q)?;
    matmul_tn_acc(x, &dk, &mut grads.w_k)?;
    matmul_tn_acc(x, &dv, &mut grads.w_v)?;
    let mut dx = matmul_nt(&dq, &params.w_q)?;
    dx.add_assign(&matmul_nt(&dk, &params.w_k)?)?;
    dx.add_assign(&matmul_nt(&dv, &params.w_v)?)?;
    Ok(dx)
}
