//! Prior and partial-likelihood terms of the target posterior.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Value, gradient and Hessian of a log-density at one point.
#[derive(Debug, Clone)]
pub struct Derivs {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: DMatrix<f64>,
}

impl Derivs {
    pub fn zero(dim: usize) -> Self {
        Derivs {
            value: 0.0,
            gradient: vec![0.0; dim],
            hessian: DMatrix::zeros(dim, dim),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Derivs, scale: f64) {
        self.value += scale * other.value;
        for (g, o) in self.gradient.iter_mut().zip(&other.gradient) {
            *g += scale * o;
        }
        self.hessian += &other.hessian * scale;
    }
}

#[inline]
pub(crate) fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

fn positive(z: f64, what: &str) -> Result<f64> {
    if z > 0.0 && z.is_finite() {
        Ok(z)
    } else {
        Err(Error::Domain(format!("{what} requires a positive argument, got {z}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Improper flat prior on the whole space.
    Uniform,
    /// Independent Gaussians, one per coordinate.
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    /// One-dimensional log-normal prior: `log z ~ N(location, scale)`.
    LogNormal { location: f64, scale: f64 },
}

impl Prior {
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        match self {
            Prior::Uniform => Ok(0.0),
            Prior::Gaussian { mean, var } => Ok(z
                .iter()
                .zip(mean.iter().zip(var))
                .map(|(&zi, (&m, &v))| log_normal_pdf(zi, m, v))
                .sum()),
            Prior::LogNormal { location, scale } => {
                let z = positive(z[0], "log-normal prior")?;
                let w = z.ln();
                Ok(log_normal_pdf(w, *location, *scale) - w)
            }
        }
    }

    pub fn derivs(&self, z: &[f64]) -> Result<Derivs> {
        let dim = z.len();
        let mut out = Derivs::zero(dim);
        match self {
            Prior::Uniform => {}
            Prior::Gaussian { mean, var } => {
                for i in 0..dim {
                    out.value += log_normal_pdf(z[i], mean[i], var[i]);
                    out.gradient[i] = -(z[i] - mean[i]) / var[i];
                    out.hessian[(i, i)] = -1.0 / var[i];
                }
            }
            Prior::LogNormal { location, scale } => {
                let zp = positive(z[0], "log-normal prior")?;
                let w = zp.ln();
                let r = (w - location) / scale;
                out.value = log_normal_pdf(w, *location, *scale) - w;
                out.gradient[0] = -(1.0 + r) / zp;
                out.hessian[(0, 0)] = (1.0 + r - 1.0 / scale) / (zp * zp);
            }
        }
        Ok(out)
    }
}

/// Rows of a logistic-regression block, intercept column included.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticBlock {
    dim: usize,
    responses: Vec<f64>,
    covariates: Vec<f64>,
    /// Distinct covariate rows with their counts of `+1` and `−1` responses;
    /// binary designs repeat rows heavily.
    patterns: Vec<Pattern>,
}

#[derive(Debug, Clone, PartialEq)]
struct Pattern {
    xi: Vec<f64>,
    plus: f64,
    minus: f64,
}

fn compress(dim: usize, responses: &[f64], covariates: &[f64]) -> Vec<Pattern> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out: Vec<Pattern> = Vec::new();
    for (&eta, xi) in responses.iter().zip(covariates.chunks_exact(dim)) {
        let key: Vec<u64> = xi.iter().map(|v| v.to_bits()).collect();
        let i = *index.entry(key).or_insert_with(|| {
            out.push(Pattern {
                xi: xi.to_vec(),
                plus: 0.0,
                minus: 0.0,
            });
            out.len() - 1
        });
        if eta > 0.0 {
            out[i].plus += 1.0;
        } else {
            out[i].minus += 1.0;
        }
    }
    out
}

/// `log S(t)` with `S(t) = 1 / (1 + e^t)`, i.e. `-softplus(t)`.
#[inline]
fn log_s(t: f64) -> f64 {
    if t > 0.0 {
        -t - (-t).exp().ln_1p()
    } else {
        -t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LogisticBlock {
    /// `covariates` is row-major with `dim` columns; every response is ±1.
    pub fn new(dim: usize, responses: Vec<f64>, covariates: Vec<f64>) -> Result<Self> {
        if dim == 0 || covariates.len() != dim * responses.len() {
            return Err(Error::config(
                "covariates",
                format!(
                    "expected {} values for {} rows of dimension {dim}",
                    dim * responses.len(),
                    responses.len()
                ),
            ));
        }
        if let Some(bad) = responses.iter().find(|&&r| r != 1.0 && r != -1.0) {
            return Err(Error::config("responses", format!("response {bad} is not in {{-1, 1}}")));
        }
        let patterns = compress(dim, &responses, &covariates);
        Ok(LogisticBlock {
            dim,
            responses,
            covariates,
            patterns,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.responses
            .iter()
            .copied()
            .zip(self.covariates.chunks_exact(self.dim))
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.patterns
            .iter()
            .map(|p| {
                let u: f64 = p.xi.iter().zip(z).map(|(a, b)| a * b).sum();
                let mut v = 0.0;
                if p.plus > 0.0 {
                    v += p.plus * log_s(u);
                }
                if p.minus > 0.0 {
                    v += p.minus * log_s(-u);
                }
                v
            })
            .sum()
    }

    pub fn derivs(&self, z: &[f64]) -> Derivs {
        let mut out = Derivs::zero(self.dim);
        for p in &self.patterns {
            let u: f64 = p.xi.iter().zip(z).map(|(a, b)| a * b).sum();
            let s = sigmoid(u);
            if p.plus > 0.0 {
                out.value += p.plus * log_s(u);
            }
            if p.minus > 0.0 {
                out.value += p.minus * log_s(-u);
            }
            // d/du of the pattern's log-likelihood and minus its second derivative
            let g = p.minus * (1.0 - s) - p.plus * s;
            let h = (p.plus + p.minus) * s * (1.0 - s);
            for a in 0..self.dim {
                if p.xi[a] == 0.0 {
                    continue;
                }
                out.gradient[a] += g * p.xi[a];
                for b in 0..self.dim {
                    out.hessian[(a, b)] -= h * p.xi[a] * p.xi[b];
                }
            }
        }
        out
    }
}

/// One block's likelihood contribution `f_j`.
#[derive(Debug, Clone, PartialEq)]
pub enum PartialLikelihood {
    /// `f(z) = N(mean; z, var)`, one-dimensional.
    Gaussian { mean: f64, var: f64 },
    /// `f(z) = N(log_location; log z, var)`, one-dimensional, `z > 0`.
    LogNormal { log_location: f64, var: f64 },
    Logistic(LogisticBlock),
}

impl PartialLikelihood {
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        match self {
            PartialLikelihood::Gaussian { mean, var } => Ok(log_normal_pdf(*mean, z[0], *var)),
            PartialLikelihood::LogNormal { log_location, var } => {
                let zp = positive(z[0], "log-normal likelihood")?;
                Ok(log_normal_pdf(*log_location, zp.ln(), *var))
            }
            PartialLikelihood::Logistic(block) => Ok(block.log_density(z)),
        }
    }

    pub fn derivs(&self, z: &[f64]) -> Result<Derivs> {
        match self {
            PartialLikelihood::Gaussian { mean, var } => {
                let mut out = Derivs::zero(1);
                out.value = log_normal_pdf(*mean, z[0], *var);
                out.gradient[0] = (mean - z[0]) / var;
                out.hessian[(0, 0)] = -1.0 / var;
                Ok(out)
            }
            PartialLikelihood::LogNormal { log_location, var } => {
                let zp = positive(z[0], "log-normal likelihood")?;
                let r = (log_location - zp.ln()) / var;
                let mut out = Derivs::zero(1);
                out.value = log_normal_pdf(*log_location, zp.ln(), *var);
                out.gradient[0] = r / zp;
                out.hessian[(0, 0)] = -(1.0 / var + r) / (zp * zp);
                Ok(out)
            }
            PartialLikelihood::Logistic(block) => Ok(block.derivs(z)),
        }
    }
}
