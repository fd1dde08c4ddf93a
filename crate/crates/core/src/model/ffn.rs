//! Position-wise two-layer feed-forward network: `act(y · W_1) · W_2`.

use crate::error::Result;
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, Tensor};

use super::config::{Activation, ModelConfig};
use super::params::BlockParams;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FfnCache {
    /// Pre-activation `y · W_1`.
    pub hidden: Tensor,
    /// `act(hidden)`.
    pub act: Tensor,
}

pub fn ffn_forward(config: &ModelConfig, params: &BlockParams, y: &Tensor) -> Result<(Tensor, FfnCache)> {
    let hidden = matmul(y, &params.w_1)?;
    let act = hidden.map(|v| config.activation.apply(v));
    let out = matmul(&act, &params.w_2)?;
    Ok((out, FfnCache { hidden, act }))
}

/// Accumulates `W_1`/`W_2` gradients and returns the gradient w.r.t. `y`.
pub fn ffn_backward(
    config: &ModelConfig,
    params: &BlockParams,
    y: &Tensor,
    cache: &FfnCache,
    grad_out: &Tensor,
    grads: &mut BlockParams,
) -> Result<Tensor> {
    matmul_tn_acc(&cache.act, grad_out, &mut grads.w_2)?;
    let mut d_hidden = matmul_nt(grad_out, &params.w_2)?;
    for (g, &h) in d_hidden.data_mut().iter_mut().zip(cache.hidden.data()) {
        *g *= config.activation.grad(h);
    }
    matmul_tn_acc(y, &d_hidden, &mut grads.w_1)?;
    matmul_nt(&d_hidden, &params.w_1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{NormTopology, Wiring};
    use crate::rng::SeededRng;

    fn params(cfg: &ModelConfig, seed: u64) -> BlockParams {
        BlockParams::init(cfg, Wiring::Pre, &mut SeededRng::new(seed, 0)).unwrap()
    }

    #[test]
    fn zero_down_projection_gives_zero() {
        let cfg = ModelConfig::tiny(NormTopology::PreNorm);
        let mut p = params(&cfg, 1);
        p.w_2.fill(0.0);
        let y = SeededRng::new(2, 0).gaussian_tensor(&[4, 8], 1.0);
        let (out, _) = ffn_forward(&cfg, &p, &y).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_composition() {
        let mut cfg = ModelConfig::tiny(NormTopology::PreNorm);
        cfg.d_ff = cfg.d_model;
        cfg.activation = Activation::Identity;
        let mut p = params(&cfg, 1);
        p.w_1 = Tensor::identity(8);
        p.w_2 = Tensor::identity(8);
        let y = SeededRng::new(3, 0).gaussian_tensor(&[4, 8], 1.0);
        let (out, _) = ffn_forward(&cfg, &p, &y).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn matches_naive_reference() {
        let cfg = ModelConfig::tiny(NormTopology::PreNorm);
        let p = params(&cfg, 4);
        let y = SeededRng::new(5, 0).gaussian_tensor(&[3, 8], 1.0);
        let (out, _) = ffn_forward(&cfg, &p, &y).unwrap();
        let (d, f) = (8, 16);
        for r in 0..3 {
            let hidden: Vec<f64> = (0..f)
                .map(|j| (0..d).map(|k| y.row(r)[k] * p.w_1.data()[k * f + j]).sum())
                .collect();
            for j in 0..d {
                let expect: f64 = (0..f).map(|k| gelu(hidden[k]) * p.w_2.data()[k * d + j]).sum();
                assert!((out.row(r)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 1.9, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
