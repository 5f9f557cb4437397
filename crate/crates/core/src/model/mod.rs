//! Statistical target and instrumental model.
//!
//! A [`ModelSpec`] holds the prior `μ`, the block likelihoods `f_1..f_b` and a
//! kernel family `K_j^(λ)`. Together they define the posterior
//! `π(z) ∝ μ(z) Π f_j(z)` and the instrumental density
//! `π̃_λ(z, x) ∝ μ(z) Π K_j^(λ)(z, x_j) f_j(x_j)`.

mod config;
mod kernel;
mod terms;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub use config::{
    build_model, draw_locations, load_logistic_csv, synthetic_logistic_data, LogisticData,
    ModelConfig, ModelKind,
};
pub use kernel::{KernelFamily, KernelKind};
pub use terms::{Derivs, LogisticBlock, PartialLikelihood, Prior};

use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;
use terms::log_normal_pdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conjugacy {
    GaussianConjugate,
    LognormalConjugate,
    Generic,
}

/// Counts of prior and likelihood evaluations, shared by clones of a model.
#[derive(Debug, Default)]
pub struct EvalCounter {
    prior: AtomicUsize,
    likelihood: AtomicUsize,
}

impl EvalCounter {
    pub fn prior(&self) -> usize {
        self.prior.load(Ordering::Relaxed)
    }

    pub fn likelihood(&self) -> usize {
        self.likelihood.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.prior.store(0, Ordering::Relaxed);
        self.likelihood.store(0, Ordering::Relaxed);
    }
}

/// The pair `(z, x_1..x_b)`; `x` is stored flat, block `j` at `x[j*d..(j+1)*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentalState {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
}

impl InstrumentalState {
    pub fn new(z: Vec<f64>, x: Vec<f64>) -> Self {
        InstrumentalState { z, x }
    }

    /// Every local copy set equal to `z`.
    pub fn collapsed(z: Vec<f64>, blocks: usize) -> Self {
        let x = z.iter().copied().cycle().take(z.len() * blocks).collect();
        InstrumentalState { z, x }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.z.len()
    }

    #[inline]
    pub fn block(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.x[j * d..(j + 1) * d]
    }

    #[inline]
    pub fn block_mut(&mut self, j: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.x[j * d..(j + 1) * d]
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    dim: usize,
    prior: Prior,
    likelihoods: Vec<PartialLikelihood>,
    kernel: KernelFamily,
    conjugacy: Conjugacy,
    counter: Arc<EvalCounter>,
}

fn detect_conjugacy(
    dim: usize,
    prior: &Prior,
    likelihoods: &[PartialLikelihood],
    kernel: &KernelFamily,
) -> Conjugacy {
    if dim != 1 {
        return Conjugacy::Generic;
    }
    match kernel.kind {
        KernelKind::Gaussian
            if matches!(prior, Prior::Uniform | Prior::Gaussian { .. })
                && likelihoods
                    .iter()
                    .all(|f| matches!(f, PartialLikelihood::Gaussian { .. })) =>
        {
            Conjugacy::GaussianConjugate
        }
        KernelKind::LogNormal
            if matches!(prior, Prior::Uniform | Prior::LogNormal { .. })
                && likelihoods
                    .iter()
                    .all(|f| matches!(f, PartialLikelihood::LogNormal { .. })) =>
        {
            Conjugacy::LognormalConjugate
        }
        _ => Conjugacy::Generic,
    }
}

impl ModelSpec {
    pub fn new(
        dim: usize,
        prior: Prior,
        likelihoods: Vec<PartialLikelihood>,
        kernel: KernelFamily,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if likelihoods.is_empty() {
            return Err(Error::config("blocks", "at least one block is required"));
        }
        if kernel.blocks() != likelihoods.len() {
            return Err(Error::config(
                "kernel_scales",
                format!(
                    "{} scales given for {} blocks",
                    kernel.blocks(),
                    likelihoods.len()
                ),
            ));
        }
        match &prior {
            Prior::Gaussian { mean, var } => {
                if mean.len() != dim || var.len() != dim {
                    return Err(Error::config("prior", "mean/variance length must equal dim"));
                }
                if var.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::config("prior", "variances must be positive"));
                }
            }
            Prior::LogNormal { scale, .. } => {
                if dim != 1 {
                    return Err(Error::config("prior", "log-normal prior is one-dimensional"));
                }
                if !(*scale > 0.0) {
                    return Err(Error::config("prior", "scale must be positive"));
                }
            }
            Prior::Uniform => {}
        }
        for (j, f) in likelihoods.iter().enumerate() {
            let ok = match f {
                PartialLikelihood::Gaussian { var, .. } => dim == 1 && *var > 0.0,
                PartialLikelihood::LogNormal { var, .. } => dim == 1 && *var > 0.0,
                PartialLikelihood::Logistic(block) => {
                    block.rows().next().is_none_or(|(_, xi)| xi.len() == dim)
                }
            };
            if !ok {
                return Err(Error::config(
                    "params",
                    format!("block {j} is inconsistent with dimension {dim}"),
                ));
            }
        }
        let conjugacy = detect_conjugacy(dim, &prior, &likelihoods, &kernel);
        Ok(ModelSpec {
            dim,
            prior,
            likelihoods,
            kernel,
            conjugacy,
            counter: Arc::new(EvalCounter::default()),
        })
    }

    /// Force the generic (random-walk) code path even for a conjugate model.
    pub fn with_conjugacy(mut self, tag: Conjugacy) -> Result<Self> {
        if tag != Conjugacy::Generic && tag != self.conjugacy {
            return Err(Error::Unsupported(format!(
                "model does not admit {tag:?} updates"
            )));
        }
        self.conjugacy = tag;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> usize {
        self.likelihoods.len()
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn likelihood(&self, j: usize) -> &PartialLikelihood {
        &self.likelihoods[j]
    }

    pub fn kernel(&self) -> &KernelFamily {
        &self.kernel
    }

    pub fn conjugacy(&self) -> Conjugacy {
        self.conjugacy
    }

    pub fn counter(&self) -> &EvalCounter {
        &self.counter
    }

    /// True when `z` must be strictly positive.
    pub fn positive_support(&self) -> bool {
        self.kernel.kind == KernelKind::LogNormal
            || matches!(self.prior, Prior::LogNormal { .. })
            || self
                .likelihoods
                .iter()
                .any(|f| matches!(f, PartialLikelihood::LogNormal { .. }))
    }

    pub fn log_prior(&self, z: &[f64]) -> Result<f64> {
        self.counter.prior.fetch_add(1, Ordering::Relaxed);
        self.prior.log_density(z)
    }

    pub fn prior_derivs(&self, z: &[f64]) -> Result<Derivs> {
        self.counter.prior.fetch_add(1, Ordering::Relaxed);
        self.prior.derivs(z)
    }

    pub fn log_likelihood(&self, j: usize, z: &[f64]) -> Result<f64> {
        self.counter.likelihood.fetch_add(1, Ordering::Relaxed);
        self.likelihoods[j].log_density(z)
    }

    pub fn likelihood_derivs(&self, j: usize, z: &[f64]) -> Result<Derivs> {
        self.counter.likelihood.fetch_add(1, Ordering::Relaxed);
        self.likelihoods[j].derivs(z)
    }

    /// Unnormalised `log π(z)`.
    pub fn log_posterior(&self, z: &[f64]) -> Result<f64> {
        let mut lp = self.log_prior(z)?;
        for j in 0..self.blocks() {
            lp += self.log_likelihood(j, z)?;
        }
        Ok(lp)
    }

    fn validate_state(&self, state: &InstrumentalState) -> Result<()> {
        if state.z.len() != self.dim || state.x.len() != self.dim * self.blocks() {
            return Err(Error::Domain(format!(
                "state has shape ({}, {}), model expects ({}, {})",
                state.z.len(),
                state.x.len(),
                self.dim,
                self.dim * self.blocks()
            )));
        }
        if let Some(v) = state.z.iter().chain(&state.x).find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite coordinate {v}")));
        }
        if self.positive_support() {
            if let Some(v) = state.z.iter().chain(&state.x).find(|v| !(**v > 0.0)) {
                return Err(Error::Domain(format!(
                    "log-normal model requires positive coordinates, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// `log μ(z) + Σ_j [log K_j^(λ)(z, x_j) + log f_j(x_j)]`.
    pub fn joint_log_density(&self, lambda: f64, state: &InstrumentalState) -> Result<f64> {
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
        }
        self.validate_state(state)?;
        let mut lp = self.log_prior(&state.z)?;
        for j in 0..self.blocks() {
            let xj = state.block(j);
            lp += self.kernel.log_density(j, lambda, &state.z, xj)?;
            lp += self.log_likelihood(j, xj)?;
        }
        Ok(lp)
    }

    /// `log K_j^(λ)(z, x_j) + log f_j(x_j)`, the local conditional up to a constant.
    pub fn local_log_density(&self, j: usize, lambda: f64, z: &[f64], xj: &[f64]) -> Result<f64> {
        Ok(self.kernel.log_density(j, lambda, z, xj)? + self.log_likelihood(j, xj)?)
    }

    /// `log f_j^(λ)(z) = log ∫ K_j^(λ)(z, x) f_j(x) dx`.
    ///
    /// Gaussian and log-normal blocks use the closed form; anything else
    /// needs a quadrature rule and is limited to one dimension.
    pub fn smoothed_partial_log_likelihood(
        &self,
        j: usize,
        lambda: f64,
        z: &[f64],
        quadrature: Option<&GaussHermite>,
    ) -> Result<f64> {
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
        }
        let kv = self.kernel.variance(j, lambda);
        match (&self.likelihoods[j], self.kernel.kind) {
            (PartialLikelihood::Gaussian { mean, var }, KernelKind::Gaussian) => {
                Ok(log_normal_pdf(*mean, z[0], var + kv))
            }
            (PartialLikelihood::LogNormal { log_location, var }, KernelKind::LogNormal) => {
                if !(z[0] > 0.0) {
                    return Err(Error::Domain(format!("z must be positive, got {}", z[0])));
                }
                Ok(log_normal_pdf(*log_location, z[0].ln(), var + kv))
            }
            _ => {
                let Some(rule) = quadrature else {
                    return Err(Error::Unsupported(
                        "smoothing a generic likelihood requires a quadrature rule".into(),
                    ));
                };
                if self.dim != 1 {
                    return Err(Error::Unsupported(
                        "quadrature smoothing is implemented for one dimension only".into(),
                    ));
                }
                self.quadrature_smoothing(j, lambda, z, rule)
            }
        }
    }

    fn quadrature_smoothing(
        &self,
        j: usize,
        lambda: f64,
        z: &[f64],
        rule: &GaussHermite,
    ) -> Result<f64> {
        let sd = self.kernel.variance(j, lambda).sqrt();
        let g0 = self.kernel.to_gaussian_space(z[0]);
        let log_integrand = |u: f64| -> f64 {
            let x = [self.kernel.from_gaussian_space(u)];
            let jac = match self.kernel.kind {
                KernelKind::Gaussian => 0.0,
                KernelKind::LogNormal => u,
            };
            match self.local_log_density(j, lambda, z, &x) {
                Ok(v) => v + jac,
                Err(_) => f64::NEG_INFINITY,
            }
        };
        rule.log_integrate(log_integrand, g0, sd)
    }

    /// For conjugate models, the block's Gaussian factor `(m_j, s_j²)` in
    /// kernel space, so that `f_j ∝ N(m_j; g(z), s_j²)`.
    pub fn conjugate_block(&self, j: usize) -> Option<(f64, f64)> {
        match (&self.likelihoods[j], self.conjugacy) {
            (PartialLikelihood::Gaussian { mean, var }, Conjugacy::GaussianConjugate) => {
                Some((*mean, *var))
            }
            (PartialLikelihood::LogNormal { log_location, var }, Conjugacy::LognormalConjugate) => {
                Some((*log_location, *var))
            }
            _ => None,
        }
    }
}
