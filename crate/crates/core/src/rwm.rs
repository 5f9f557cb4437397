//! Gaussian random-walk Metropolis.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, uniform};

/// Optimal random-walk scaling `2.38² / d`.
pub fn optimal_scale(dim: usize) -> f64 {
    2.38 * 2.38 / dim as f64
}

/// Proposal `x' = x + L ε` with `L Lᵀ` the proposal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    factor: DMatrix<f64>,
}

impl Proposal {
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::config("proposal", "covariance must be square"));
        }
        if (cov - cov.transpose()).amax() > 1e-10 * cov.amax().max(1.0) {
            return Err(Error::config("proposal", "covariance must be symmetric"));
        }
        let ch = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::config("proposal", "covariance must be positive definite"))?;
        Ok(Proposal { factor: ch.l() })
    }

    pub fn isotropic(dim: usize, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::config("proposal", format!("variance {var} is not positive")));
        }
        Ok(Proposal {
            factor: DMatrix::identity(dim, dim) * var.sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    pub fn propose<R: rand::Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let d = x.len();
        let eps: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        (0..d)
            .map(|i| x[i] + (0..=i).map(|k| self.factor[(i, k)] * eps[k]).sum::<f64>())
            .collect()
    }
}

/// Everything needed to audit one Metropolis decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RwmStep {
    pub proposal: Vec<f64>,
    pub log_ratio: f64,
    pub log_u: f64,
    pub accepted: bool,
}

/// Evaluate a log-target, treating domain violations as zero density.
pub fn log_target_or_neg_inf(v: Result<f64>) -> Result<f64> {
    match v {
        Ok(v) if v.is_nan() => Ok(f64::NEG_INFINITY),
        Ok(v) => Ok(v),
        Err(Error::Domain(_)) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// One Metropolis step accepting with probability `min(1, p(x')/p(x))`.
pub fn rwm_step<R: rand::Rng + ?Sized>(
    x: &mut [f64],
    current_lp: &mut f64,
    target: &mut impl FnMut(&[f64]) -> Result<f64>,
    proposal: &Proposal,
    rng: &mut R,
) -> Result<RwmStep> {
    let cand = proposal.propose(x, rng);
    let lp = log_target_or_neg_inf(target(&cand))?;
    let log_ratio = lp - *current_lp;
    let log_u = uniform(rng).ln();
    let accepted = log_u < log_ratio;
    if accepted {
        x.copy_from_slice(&cand);
        *current_lp = lp;
    }
    Ok(RwmStep {
        proposal: cand,
        log_ratio,
        log_u,
        accepted,
    })
}
