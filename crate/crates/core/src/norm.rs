//! Layer normalization over the last axis, with learnable gain and bias.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-row statistics saved by the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// `y = gain ⊙ (x − mean) / sqrt(var + eps) + bias`, population variance
/// taken over the last axis of `x`.
pub fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LnCache)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm_forward",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::contract(format!("eps must be non-negative, got {eps}")));
    }
    let rows = x.rows();
    let mut y = Tensor::zeros(x.shape());
    let mut cache = LnCache {
        mean: Vec::with_capacity(rows),
        inv_std: Vec::with_capacity(rows),
    };
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (j, (out, &v)) in y.row_mut(r).iter_mut().zip(xr).enumerate() {
            *out = g[j] * (v - mean) * inv_std + b[j];
        }
        cache.mean.push(mean);
        cache.inv_std.push(inv_std);
    }
    Ok((y, cache))
}

/// Exact gradients of [`layer_norm_forward`] with respect to its input,
/// gain and bias.
pub fn layer_norm_backward(
    grad_y: &Tensor,
    cache: &LnCache,
    x: &Tensor,
    gain: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = x.cols();
    let rows = x.rows();
    if !grad_y.same_shape(x) || cache.mean.len() != rows || cache.inv_std.len() != rows {
        return Err(Error::contract(format!(
            "layer norm cache holds {} rows, input {:?}, grad {:?}",
            cache.mean.len(),
            x.shape(),
            grad_y.shape()
        )));
    }
    if gain.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm_backward",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let g = gain.data();
    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_gain = Tensor::zeros(gain.shape());
    let mut grad_bias = Tensor::zeros(gain.shape());
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let (mean, inv_std) = (cache.mean[r], cache.inv_std[r]);
        let gy = grad_y.row(r);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            xhat[j] = (x.row(r)[j] - mean) * inv_std;
            dxhat[j] = gy[j] * g[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        let (m1, m2) = (sum_dxhat / d as f64, sum_dxhat_xhat / d as f64);
        let gx = grad_x.row_mut(r);
        for j in 0..d {
            gx[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
        }
        for (j, acc) in grad_gain.data_mut().iter_mut().enumerate() {
            *acc += gy[j] * xhat[j];
        }
        for (acc, &v) in grad_bias.data_mut().iter_mut().zip(gy) {
            *acc += v;
        }
    }
    Ok((grad_x, grad_gain, grad_bias))
}
