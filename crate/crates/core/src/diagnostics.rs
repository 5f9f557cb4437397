//! Chain diagnostics: autocorrelation and batch-means effective sample size.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::samples::Samples;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the `n − 1` divisor.
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Standard error of the mean of independent replicates.
pub fn standard_error(x: &[f64]) -> f64 {
    (sample_variance(x) / x.len() as f64).sqrt()
}

/// Autocorrelations at lags `0..=max_lag`, normalised by the lag-0 sum.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| {
            if c0 == 0.0 {
                return if k == 0 { 1.0 } else { 0.0 };
            }
            c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / c0
        })
        .collect()
}

fn batch_size(n: usize) -> usize {
    ((n as f64).sqrt().floor() as usize).max(1)
}

/// Batch-means covariance `b_n · Cov(batch means)` with `b_n = ⌊√n⌋`.
fn batch_means_covariance(s: &Samples) -> Result<DMatrix<f64>> {
    let n = s.len();
    let bs = batch_size(n);
    let a = n / bs;
    if a < 2 {
        return Err(Error::config("chain", format!("{n} draws are too few for batch means")));
    }
    let p = s.dim();
    let overall = s.tail(n - a * bs).mean();
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for k in 0..a {
        let start = n - a * bs + k * bs;
        let mut bm = vec![0.0; p];
        for i in start..start + bs {
            for (m, v) in bm.iter_mut().zip(s.row(i)) {
                *m += v / bs as f64;
            }
        }
        let d: Vec<f64> = bm.iter().zip(&overall).map(|(x, m)| x - m).collect();
        for r in 0..p {
            for c in 0..p {
                cov[(r, c)] += d[r] * d[c];
            }
        }
    }
    Ok(cov * (bs as f64 / (a as f64 - 1.0)))
}

fn sample_covariance(s: &Samples) -> DMatrix<f64> {
    let p = s.dim();
    let m = s.mean();
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for row in s.rows() {
        for r in 0..p {
            for c in 0..p {
                cov[(r, c)] += (row[r] - m[r]) * (row[c] - m[c]);
            }
        }
    }
    cov / (s.len() as f64 - 1.0)
}

/// Per-coordinate batch-means ESS, `n · s² / σ̂²_BM`.
pub fn batch_means_ess(s: &Samples) -> Result<Vec<f64>> {
    let bm = batch_means_covariance(s)?;
    let sc = sample_covariance(s);
    let n = s.len() as f64;
    Ok((0..s.dim())
        .map(|i| if bm[(i, i)] > 0.0 { n * sc[(i, i)] / bm[(i, i)] } else { n })
        .collect())
}

/// Multivariate ESS of Vats, Flegal & Jones: `n (det Λ / det Σ)^{1/p}`.
pub fn multivariate_ess(s: &Samples) -> Result<f64> {
    let p = s.dim() as f64;
    let det_bm = batch_means_covariance(s)?.determinant();
    let det_s = sample_covariance(s).determinant();
    if !(det_bm > 0.0 && det_s > 0.0) {
        return Err(Error::Undefined(
            "chain covariance is singular; multivariate ESS undefined".into(),
        ));
    }
    Ok(s.len() as f64 * (det_s / det_bm).powf(1.0 / p))
}
