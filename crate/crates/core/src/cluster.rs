//! Simulated-cluster time accounting and the embarrassingly parallel
//! baselines: subposterior chains combined by Consensus Monte Carlo, and a
//! direct random-walk chain on the full posterior.
//!
//! Time is analytic. An iteration of the global consensus sampler costs
//! `kℓ + 2C` (k inner steps per block, then a round trip to the central
//! node); a direct distributed chain costs `ℓ + 2C` per step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{find_mode, posterior_mode, LaplaceFit};
use crate::model::ModelSpec;
use crate::rng::{self, Domain};
use crate::rwm::{log_target_or_neg_inf, optimal_scale, rwm_step, Proposal};
use crate::samples::Samples;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Time per partial-likelihood evaluation.
    pub ell: f64,
    /// One-way communication latency.
    #[serde(rename = "C")]
    pub comm: f64,
    /// Inner MCMC iterations per block update.
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Gcmc,
    Direct,
}

impl LatencyModel {
    pub fn new(ell: f64, comm: f64, k: usize) -> Result<Self> {
        let m = LatencyModel { ell, comm, k };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ell > 0.0 && self.ell.is_finite()) {
            return Err(Error::config("ell", "must be positive"));
        }
        if !(self.comm >= 0.0 && self.comm.is_finite()) {
            return Err(Error::config("C", "must be non-negative"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        Ok(())
    }

    fn compute(&self, algorithm: Algorithm) -> f64 {
        match algorithm {
            Algorithm::Gcmc => self.k as f64 * self.ell,
            Algorithm::Direct => self.ell,
        }
    }

    pub fn iteration_time(&self, algorithm: Algorithm) -> f64 {
        self.compute(algorithm) + 2.0 * self.comm
    }

    pub fn likelihood_fraction(&self, algorithm: Algorithm) -> f64 {
        self.compute(algorithm) / self.iteration_time(algorithm)
    }

    /// `⌊budget / iteration_time⌋`.
    pub fn samples_within_budget(&self, algorithm: Algorithm, budget: f64) -> Result<u64> {
        if !(budget > 0.0) {
            return Err(Error::config("budget", "must be positive"));
        }
        let t = self.iteration_time(algorithm);
        let mut n = (budget / t).floor() as u64;
        // guard the floor against rounding in either direction
        while n > 0 && n as f64 * t > budget {
            n -= 1;
        }
        while (n + 1) as f64 * t <= budget {
            n += 1;
        }
        Ok(n)
    }

    pub fn budget_report(&self, algorithm: Algorithm, budget: f64) -> Result<BudgetReport> {
        Ok(BudgetReport {
            algorithm,
            samples: self.samples_within_budget(algorithm, budget)?,
            iteration_time: self.iteration_time(algorithm),
            likelihood_fraction: self.likelihood_fraction(algorithm),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub algorithm: Algorithm,
    pub samples: u64,
    pub iteration_time: f64,
    pub likelihood_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct RwmChain {
    pub samples: Samples,
    pub acceptance: f64,
}

/// Proposal `(2.38²/d) H⁻¹` from a Laplace fit, falling back to `I`.
fn laplace_rwm_proposal(fit: &LaplaceFit, scale: f64) -> Result<Proposal> {
    let d = fit.mode.len();
    match fit.covariance() {
        Some(cov) => {
            let sym = (&cov + cov.transpose()) * (0.5 * optimal_scale(d) * scale);
            Proposal::from_covariance(&sym)
        }
        None => {
            log::warn!("Laplace curvature is not positive definite; using an identity proposal");
            Proposal::isotropic(d, optimal_scale(d) * scale)
        }
    }
}

fn rwm_chain(
    target: impl Fn(&[f64]) -> Result<f64>,
    start: Vec<f64>,
    proposal: &Proposal,
    length: usize,
    mut rng: rng::StreamRng,
) -> Result<RwmChain> {
    let mut x = start;
    let mut target = |z: &[f64]| target(z);
    let mut lp = log_target_or_neg_inf(target(&x))?;
    if !lp.is_finite() {
        return Err(Error::Domain("chain starts outside the support".into()));
    }
    let mut samples = Samples::with_capacity(x.len(), length);
    let mut accepted = 0usize;
    for _ in 0..length {
        if rwm_step(&mut x, &mut lp, &mut target, proposal, &mut rng)?.accepted {
            accepted += 1;
        }
        samples.push(&x);
    }
    Ok(RwmChain {
        samples,
        acceptance: accepted as f64 / length.max(1) as f64,
    })
}

/// Options shared by the random-walk baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RwmOptions {
    pub length: usize,
    pub seed: u64,
    /// Multiplier on the optimally scaled Laplace covariance.
    pub scale: f64,
    pub parallel: bool,
}

impl RwmOptions {
    pub fn new(length: usize, seed: u64) -> Self {
        RwmOptions {
            length,
            seed,
            scale: 1.0,
            parallel: true,
        }
    }
}

fn start_point(model: &ModelSpec) -> Vec<f64> {
    crate::gibbs::default_start(model)
}

/// Chain `j` targets `μ(z)^{1/b} f_j(z)`.
pub fn run_subposterior_chains(model: &ModelSpec, opts: &RwmOptions) -> Result<Vec<RwmChain>> {
    let b = model.blocks();
    let inv_b = 1.0 / b as f64;
    let one = |j: usize| -> Result<RwmChain> {
        let fit = find_mode(
            |z| {
                let mut d = model.likelihood_derivs(j, z)?;
                d.add_scaled(&model.prior_derivs(z)?, inv_b);
                Ok(d)
            },
            &start_point(model),
            200,
        )?;
        let proposal = laplace_rwm_proposal(&fit, opts.scale)?;
        let target = |z: &[f64]| -> Result<f64> {
            Ok(inv_b * model.log_prior(z)? + model.log_likelihood(j, z)?)
        };
        let r = rng::stream(opts.seed, Domain::Subposterior, j as u64, 0);
        rwm_chain(target, fit.mode.clone(), &proposal, opts.length, r)
    };
    if opts.parallel {
        (0..b).into_par_iter().map(one).collect()
    } else {
        (0..b).map(one).collect()
    }
}

/// Random-walk Metropolis on the full posterior, started at its mode.
pub fn run_direct_chain(model: &ModelSpec, opts: &RwmOptions) -> Result<RwmChain> {
    let fit = posterior_mode(model, &start_point(model))?;
    let proposal = laplace_rwm_proposal(&fit, opts.scale)?;
    let r = rng::stream(opts.seed, Domain::Direct, 0, 0);
    rwm_chain(|z| model.log_posterior(z), fit.mode.clone(), &proposal, opts.length, r)
}

fn sample_covariance(s: &Samples) -> DMatrix<f64> {
    let p = s.dim();
    let m = s.mean();
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for row in s.rows() {
        let d = DVector::from_iterator(p, row.iter().zip(&m).map(|(a, b)| a - b));
        cov += &d * d.transpose();
    }
    cov / (s.len() as f64 - 1.0)
}

/// Inverse sample covariance, or the inverse of its diagonal if singular.
fn precision_weight(s: &Samples, j: usize) -> Result<DMatrix<f64>> {
    let cov = sample_covariance(s);
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.inverse());
    }
    log::warn!("chain {j}: rank-deficient sample covariance, using its diagonal");
    let diag = cov.diagonal();
    if diag.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Undefined(format!("chain {j} has a constant coordinate")));
    }
    Ok(DMatrix::from_diagonal(&diag.map(|v| 1.0 / v)))
}

/// Consensus chain `(Σ_j W_j)⁻¹ Σ_j W_j z_j^i`, `W_j` the inverse sample
/// covariance of chain `j`.
pub fn cmc_combine(chains: &[Samples]) -> Result<Samples> {
    let first = chains
        .first()
        .ok_or_else(|| Error::config("chains", "at least one chain is required"))?;
    let (n, p) = (first.len(), first.dim());
    if chains.iter().any(|c| c.len() != n || c.dim() != p) {
        return Err(Error::config("chains", "chains must have equal lengths and dimensions"));
    }
    if n < 2 {
        return Err(Error::config("chains", "at least two draws per chain are required"));
    }
    let weights = chains
        .iter()
        .enumerate()
        .map(|(j, c)| precision_weight(c, j))
        .collect::<Result<Vec<_>>>()?;
    let total = weights.iter().fold(DMatrix::<f64>::zeros(p, p), |acc, w| acc + w);
    let total_inv = total
        .cholesky()
        .ok_or_else(|| Error::Undefined("summed precision is singular".into()))?
        .inverse();
    let mix: Vec<DMatrix<f64>> = weights.iter().map(|w| &total_inv * w).collect();
    let mut out = Samples::with_capacity(p, n);
    let mut row = vec![0.0; p];
    for i in 0..n {
        row.iter_mut().for_each(|v| *v = 0.0);
        for (c, m) in chains.iter().zip(&mix) {
            let z = c.row(i);
            for r in 0..p {
                row[r] += (0..p).map(|k| m[(r, k)] * z[k]).sum::<f64>();
            }
        }
        out.push(&row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{mean, sample_variance};
    use crate::model::{KernelFamily, KernelKind, PartialLikelihood, Prior};
    use crate::rng::standard_normal;
    use proptest::prelude::*;

    #[test]
    fn latency_examples() {
        let m = LatencyModel::new(1.0, 10.0, 20).unwrap();
        assert_eq!(m.iteration_time(Algorithm::Gcmc), 40.0);
        assert_eq!(m.likelihood_fraction(Algorithm::Gcmc), 0.5);
        assert!((m.likelihood_fraction(Algorithm::Direct) - 1.0 / 21.0).abs() < 1e-15);
        assert_eq!(m.samples_within_budget(Algorithm::Gcmc, 200_000.0).unwrap(), 5000);
        assert_eq!(m.samples_within_budget(Algorithm::Direct, 200_000.0).unwrap(), 9523);
        assert_eq!(m.samples_within_budget(Algorithm::Gcmc, 39.0).unwrap(), 0);
        let free = LatencyModel::new(1.0, 0.0, 1).unwrap();
        assert_eq!(free.iteration_time(Algorithm::Gcmc), 1.0);
        assert_eq!(free.iteration_time(Algorithm::Direct), 1.0);
        assert_eq!(free.likelihood_fraction(Algorithm::Gcmc), 1.0);
        assert!(LatencyModel::new(1.0, 1.0, 0).is_err());
        assert!(LatencyModel::new(0.0, 1.0, 1).is_err());
        let rep = serde_json::to_value(m.budget_report(Algorithm::Direct, 200_000.0).unwrap()).unwrap();
        assert_eq!(rep["algorithm"], "direct");
        assert_eq!(rep["samples"], 9523);
    }

    fn gaussian(b: usize, prior_var: f64) -> ModelSpec {
        ModelSpec::new(
            1,
            Prior::Gaussian {
                mean: vec![0.5],
                var: vec![prior_var],
            },
            (0..b)
                .map(|j| PartialLikelihood::Gaussian {
                    mean: 1.0 + 0.3 * j as f64,
                    var: 2.0,
                })
                .collect(),
            KernelFamily::new(KernelKind::Gaussian, vec![1.0; b]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn subposterior_moments_match_fractionated_prior() {
        let b = 4;
        let m = gaussian(b, 1.5);
        let chains = run_subposterior_chains(&m, &RwmOptions::new(100_000, 3)).unwrap();
        for (j, c) in chains.iter().enumerate() {
            // prior variance bσ0², likelihood N(μ_j; z, 2)
            let prec = 1.0 / (b as f64 * 1.5) + 0.5;
            let var = 1.0 / prec;
            let mu = var * (0.5 / (b as f64 * 1.5) + (1.0 + 0.3 * j as f64) / 2.0);
            let z = c.samples.column(0);
            let ess = crate::diagnostics::batch_means_ess(&c.samples).unwrap()[0];
            let se = (var / ess).sqrt();
            assert!((mean(&z) - mu).abs() < 4.0 * se, "chain {j}: {} vs {mu}", mean(&z));
            assert!((sample_variance(&z) / var - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn single_block_subposterior_is_the_posterior() {
        let m = gaussian(1, 1.0);
        let sub = run_subposterior_chains(&m, &RwmOptions::new(50_000, 1)).unwrap();
        let direct = run_direct_chain(&m, &RwmOptions::new(50_000, 2)).unwrap();
        let (a, b) = (sub[0].samples.column(0), direct.samples.column(0));
        let se = (sample_variance(&a) / 5000.0 + sample_variance(&b) / 5000.0).sqrt();
        assert!((mean(&a) - mean(&b)).abs() < 4.0 * se);
        let combined = cmc_combine(&[sub[0].samples.clone()]).unwrap();
        for (x, y) in combined.as_flat().iter().zip(sub[0].samples.as_flat()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn iid_chain(n: usize, mean: [f64; 2], seed: u64) -> Samples {
        let mut r = rng::seeded(seed);
        let mut s = Samples::new(2);
        for _ in 0..n {
            let a = standard_normal(&mut r);
            let b = standard_normal(&mut r);
            s.push(&[mean[0] + a, mean[1] + 0.5 * a + b]);
        }
        s
    }

    #[test]
    fn common_covariance_consensus_is_average() {
        let chains: Vec<Samples> = (0..3).map(|j| iid_chain(20_000, [j as f64, -(j as f64)], j)).collect();
        let c = cmc_combine(&chains).unwrap().mean();
        assert!((c[0] - 1.0).abs() < 0.03 && (c[1] + 1.0).abs() < 0.03, "{c:?}");
        assert!(cmc_combine(&[]).is_err());
        assert!(cmc_combine(&[iid_chain(5, [0.0; 2], 1), iid_chain(6, [0.0; 2], 2)]).is_err());
    }

    #[test]
    fn singular_covariance_falls_back_to_diagonal() {
        let mut s = Samples::new(2);
        for i in 0..50 {
            s.push(&[i as f64, 2.0 * i as f64]);
        }
        let out = cmc_combine(&[s.clone(), s.clone()]).unwrap();
        assert!((out.row(7)[1] - 14.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn budget_accounting_identity(ell in 0.01f64..10.0, comm in 0.0f64..50.0, k in 1usize..40, budget in 1.0f64..1e7) {
            let m = LatencyModel::new(ell, comm, k).unwrap();
            for a in [Algorithm::Gcmc, Algorithm::Direct] {
                let n = m.samples_within_budget(a, budget).unwrap() as f64;
                let t = m.iteration_time(a);
                prop_assert!(n * t <= budget && budget < (n + 1.0) * t);
            }
            let (g, d) = (m.likelihood_fraction(Algorithm::Gcmc), m.likelihood_fraction(Algorithm::Direct));
            prop_assert!(g >= d);
            prop_assert_eq!(g == d, k == 1 || comm == 0.0);
        }

        #[test]
        fn consensus_commutes_with_affine_maps(a11 in 0.5f64..2.0, a12 in -1.0f64..1.0, a22 in 0.5f64..2.0, c0 in -5.0f64..5.0, c1 in -5.0f64..5.0) {
            let chains: Vec<Samples> = (0..3).map(|j| iid_chain(200, [j as f64, 0.5], 10 + j)).collect();
            let map = |s: &Samples| {
                let mut o = Samples::new(2);
                for r in s.rows() {
                    o.push(&[a11 * r[0] + a12 * r[1] + c0, a22 * r[1] + c1]);
                }
                o
            };
            let base = cmc_combine(&chains).unwrap();
            let mapped = cmc_combine(&chains.iter().map(map).collect::<Vec<_>>()).unwrap();
            let expect = map(&base);
            for (x, y) in mapped.as_flat().iter().zip(expect.as_flat()) {
                prop_assert!((x - y).abs() < 1e-8 * (1.0 + y.abs()));
            }
        }
    }
}
