//! Singular-value diagnostics of weight matrices and cosine similarity between
//! layer outputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative threshold of the hard rank.
pub const DEFAULT_RANK_THRESHOLD: f64 = 0.01;
/// Singular values below `CONDITION_FLOOR · σ_max` count as zero.
pub const CONDITION_FLOOR: f64 = 1e-12;

const MAX_SWEEPS: usize = 100;

fn check_finite(m: &Tensor, op: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: input contains non-finite entries")))
    }
}

/// Eigenvalues of a symmetric `n × n` matrix (row-major), by cyclic Jacobi
/// rotations. Unsorted.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::contract(format!(
            "expected {} entries for a {n}×{n} matrix, got {}",
            n * n,
            a.len()
        )));
    }
    let mut a = a.to_vec();
    let total: f64 = a.iter().map(|v| v * v).sum();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= f64::EPSILON * f64::EPSILON * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    Ok((0..n).map(|i| a[i * n + i]).collect())
}

/// Singular values of an `m × n` matrix, sorted descending; `min(m, n)` of them.
///
/// One-sided Jacobi: rotations that diagonalize `MᵀM` are applied to the
/// columns of `M` itself, so small singular values keep full relative accuracy
/// instead of being squared into round-off.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = m.dims2("singular_values")?;
    check_finite(m, "singular_values")?;
    // work on the orientation with fewer columns
    let (r, c, mut w) = if cols <= rows {
        (rows, cols, m.data().to_vec())
    } else {
        (cols, rows, m.transpose()?.into_data())
    };
    let col_dot = |w: &[f64], i: usize, j: usize| -> f64 { (0..r).map(|k| w[k * c + i] * w[k * c + j]).sum() };
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in p + 1..c {
                let alpha = col_dot(&w, p, p);
                let beta = col_dot(&w, q, q);
                let gamma = col_dot(&w, p, q);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for k in 0..r {
                    let wp = w[k * c + p];
                    let wq = w[k * c + q];
                    w[k * c + p] = cs * wp - sn * wq;
                    w[k * c + q] = sn * wp + cs * wq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = (0..c).map(|j| col_dot(&w, j, j).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankMetrics {
    /// Fraction of singular values above `ε · σ₁`.
    pub hard: f64,
    /// Exponentiated spectral entropy over `d`.
    pub soft: f64,
    /// Effective dimension ratio, `100 · (Σσ)² / (d · Σσ²)`, in percent.
    pub edr: f64,
}

pub fn rank_metrics(sigmas: &[f64], d: usize, threshold: f64) -> Result<RankMetrics> {
    if d == 0 {
        return Err(Error::contract("dimension must be at least 1"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if sigmas.len() > d {
        return Err(Error::contract(format!(
            "{} singular values for dimension {d}",
            sigmas.len()
        )));
    }
    if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::contract("singular values must be finite and non-negative"));
    }
    if sigmas.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::contract("singular values must be sorted descending"));
    }
    let sum: f64 = sigmas.iter().sum();
    if sum == 0.0 {
        return Ok(RankMetrics {
            hard: 0.0,
            soft: 0.0,
            edr: 0.0,
        });
    }
    let df = d as f64;
    let cut = threshold * sigmas[0];
    let hard = sigmas.iter().filter(|&&s| s > cut).count() as f64 / df;
    let entropy: f64 = sigmas
        .iter()
        .map(|&s| s / sum)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    let soft = (entropy.exp() / df).min(1.0);
    let sum_sq: f64 = sigmas.iter().map(|s| s * s).sum();
    let edr = 100.0 * sum * sum / (df * sum_sq);
    Ok(RankMetrics { hard, soft, edr })
}

/// `σ_max / σ_min`, or `+∞` when the smallest singular value is below
/// `1e-12 · σ_max` (including the zero matrix).
pub fn condition_number(m: &Tensor) -> Result<f64> {
    Ok(condition_of(&singular_values(m)?))
}

fn condition_of(sorted: &[f64]) -> f64 {
    let max = sorted[0];
    let min = sorted[sorted.len() - 1];
    if max == 0.0 || min <= CONDITION_FLOOR * max {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralReport {
    pub singular_values: Vec<f64>,
    pub rank: RankMetrics,
    pub condition: f64,
}

/// All singular-value diagnostics of one matrix; `d` is its smaller dimension.
pub fn spectral_report(m: &Tensor, threshold: f64) -> Result<SpectralReport> {
    let s = singular_values(m)?;
    let rank = rank_metrics(&s, s.len(), threshold)?;
    let condition = condition_of(&s);
    Ok(SpectralReport {
        singular_values: s,
        rank,
        condition,
    })
}

/// Median with the mean-of-middle-pair convention for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Sample covariance (divisor `n − 1`) of the rows of an `n × d` matrix.
pub fn row_covariance(m: &Tensor) -> Result<Tensor> {
    let (n, d) = m.dims2("row_covariance")?;
    if n < 2 {
        return Err(Error::contract(format!("covariance needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in mean.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = m.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Tensor::from_vec(&[d, d], cov)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenSpectrum {
    /// Eigenvalues sorted descending, divided by their median.
    pub normalized: Vec<f64>,
    /// `(i + 1) / d` for the i-th value.
    pub rank_fraction: Vec<f64>,
    pub median: f64,
}

/// Covariance eigenvalues of the rows of `m`, normalized by their median.
pub fn eigenspectrum_over_median(m: &Tensor) -> Result<EigenSpectrum> {
    check_finite(m, "eigenspectrum_over_median")?;
    let cov = row_covariance(m)?;
    let d = cov.rows();
    let mut eig: Vec<f64> = symmetric_eigenvalues(cov.data(), d)?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let top = eig[0];
    if top == 0.0 {
        return Err(Error::Numeric("covariance has rank 0".into()));
    }
    let med = median(&eig).expect("non-empty spectrum");
    if med <= CONDITION_FLOOR * top {
        return Err(Error::Numeric(format!(
            "degenerate spectrum: median eigenvalue {med:e} against largest {top:e}"
        )));
    }
    Ok(EigenSpectrum {
        normalized: eig.iter().map(|v| v / med).collect(),
        rank_fraction: (1..=d).map(|i| i as f64 / d as f64).collect(),
        median: med,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub layers: usize,
    /// Row-major `layers × layers` mean cosine similarities.
    pub values: Vec<f64>,
    /// Mean of the entries with `|i − j| = k`, for `k = 0..layers`.
    pub by_distance: Vec<f64>,
    /// Tokens dropped because their vector had zero norm in some layer.
    pub excluded_tokens: usize,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.layers + j]
    }
}

/// Mean token-wise cosine similarity between every pair of layer outputs.
pub fn layer_similarity(activations: &[Tensor]) -> Result<SimilarityMatrix> {
    let layers = activations.len();
    if layers < 2 {
        return Err(Error::contract(format!("need at least 2 layers, got {layers}")));
    }
    let (t, _) = activations[0].dims2("layer_similarity")?;
    for a in activations {
        if a.shape() != activations[0].shape() {
            return Err(Error::Dimension {
                op: "layer_similarity",
                lhs: activations[0].shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
        check_finite(a, "layer_similarity")?;
    }
    let norms: Vec<Vec<f64>> = activations
        .iter()
        .map(|a| (0..t).map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
        .collect();
    let kept: Vec<usize> = (0..t).filter(|&i| norms.iter().all(|n| n[i] > 0.0)).collect();
    if kept.is_empty() {
        return Err(Error::InsufficientData("every token has a zero-norm vector".into()));
    }
    let mut values = vec![0.0; layers * layers];
    for i in 0..layers {
        values[i * layers + i] = 1.0;
        for j in i + 1..layers {
            let total: f64 = kept
                .iter()
                .map(|&tok| {
                    let dot: f64 = activations[i]
                        .row(tok)
                        .iter()
                        .zip(activations[j].row(tok))
                        .map(|(a, b)| a * b)
                        .sum();
                    (dot / (norms[i][tok] * norms[j][tok])).clamp(-1.0, 1.0)
                })
                .sum();
            let mean = total / kept.len() as f64;
            values[i * layers + j] = mean;
            values[j * layers + i] = mean;
        }
    }
    let by_distance = (0..layers)
        .map(|k| {
            let entries: Vec<f64> = (0..layers - k).map(|i| values[i * layers + i + k]).collect();
            entries.iter().sum::<f64>() / entries.len() as f64
        })
        .collect();
    Ok(SimilarityMatrix {
        layers,
        values,
        by_distance,
        excluded_tokens: t - kept.len(),
    })
}
