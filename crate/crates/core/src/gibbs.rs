//! Metropolis-within-Gibbs sampler for the instrumental model.
//!
//! One sweep draws every local block `x_j` given the previous `z`, then a new
//! `z` given all `x_j`. Conjugate models use exact draws; otherwise each
//! local update is `k` random-walk Metropolis steps.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::posterior_mode;
use crate::model::{Conjugacy, InstrumentalState, KernelKind, ModelSpec, Prior};
use crate::rng::{self, standard_normal, Domain, StreamRng};
use crate::rwm::{log_target_or_neg_inf, optimal_scale, rwm_step, Proposal};
use crate::samples::Samples;
use crate::test_fn::TestFunction;

/// How random-walk proposals for the local blocks are built.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSpec {
    /// `(2.38²/d) (P_K + H_j)⁻¹`, with `H_j` the block's curvature at the
    /// posterior mode and `P_K` the kernel precision.
    #[default]
    Laplace,
    /// `var · I` for every block.
    Isotropic(f64),
    /// Explicit per-block covariance matrices (row-major, `d × d`).
    Covariances(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct GibbsConfig {
    pub lambda: f64,
    pub chain_length: usize,
    pub inner_steps: usize,
    pub proposal: ProposalSpec,
    pub seed: u64,
    pub init: Option<InstrumentalState>,
    pub burn_in: usize,
    pub keep_local: bool,
    /// RWM steps for `z` when its conditional cannot be drawn exactly.
    pub global_fallback_steps: Option<usize>,
    pub parallel: bool,
    /// Order in which local blocks are visited within a sweep.
    pub block_order: Option<Vec<usize>>,
}

impl GibbsConfig {
    pub fn new(lambda: f64, chain_length: usize, seed: u64) -> Self {
        GibbsConfig {
            lambda,
            chain_length,
            inner_steps: 1,
            proposal: ProposalSpec::Laplace,
            seed,
            init: None,
            burn_in: 0,
            keep_local: false,
            global_fallback_steps: None,
            parallel: false,
            block_order: None,
        }
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("{} is not positive", self.lambda)));
        }
        if self.chain_length == 0 {
            return Err(Error::config("chain_length", "must be at least 1"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("inner_steps", "must be at least 1"));
        }
        if self.burn_in >= self.chain_length {
            return Err(Error::config(
                "burn_in",
                format!("{} discards the whole chain of {}", self.burn_in, self.chain_length),
            ));
        }
        if let Some(order) = &self.block_order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..model.blocks()).collect::<Vec<_>>() {
                return Err(Error::config("block_order", "must be a permutation of the blocks"));
            }
        }
        if let Some(init) = &self.init {
            model.joint_log_density(self.lambda, init)?;
        }
        Ok(())
    }
}

/// Curvature of each block likelihood at the posterior mode, reused to build
/// Laplace proposals for any `λ`.
#[derive(Debug, Clone)]
pub struct BlockCurvature {
    pub mode: Vec<f64>,
    pub hessians: Vec<DMatrix<f64>>,
}

impl BlockCurvature {
    pub fn at_posterior_mode(model: &ModelSpec) -> Result<Self> {
        let fit = posterior_mode(model, &default_start(model))?;
        let hessians = (0..model.blocks())
            .map(|j| model.likelihood_derivs(j, &fit.mode).map(|d| -d.hessian))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockCurvature {
            mode: fit.mode,
            hessians,
        })
    }
}

/// A reasonable starting point for mode searches.
pub fn default_start(model: &ModelSpec) -> Vec<f64> {
    match model.prior() {
        Prior::Gaussian { mean, .. } => mean.clone(),
        Prior::LogNormal { location, .. } => vec![location.exp()],
        Prior::Uniform if model.positive_support() => vec![1.0; model.dim()],
        Prior::Uniform => vec![0.0; model.dim()],
    }
}

#[derive(Debug, Clone)]
enum GlobalUpdate {
    /// Gaussian draw in kernel space.
    Exact,
    Rwm { steps: usize, proposal: Proposal },
    Unavailable,
}

/// Everything a sweep needs at one value of `λ`.
#[derive(Debug, Clone)]
pub struct SweepKernels {
    pub lambda: f64,
    pub inner_steps: usize,
    local: Vec<Option<Proposal>>,
    global: GlobalUpdate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SweepStats {
    pub local_accepted: usize,
    pub global_accepted: usize,
}

fn laplace_proposal(
    model: &ModelSpec,
    j: usize,
    lambda: f64,
    curvature: &BlockCurvature,
) -> Result<Proposal> {
    let d = model.dim();
    let kv = model.kernel().variance(j, lambda);
    let kernel_prec = match model.kernel().kind {
        KernelKind::Gaussian => 1.0 / kv,
        KernelKind::LogNormal => {
            let zh = curvature.mode[0];
            1.0 / (kv * zh * zh)
        }
    };
    let mut prec = curvature.hessians[j].clone();
    for i in 0..d {
        prec[(i, i)] += kernel_prec;
    }
    let scale = optimal_scale(d);
    match prec.cholesky() {
        Some(ch) => {
            let cov = ch.inverse() * scale;
            let sym = (&cov + cov.transpose()) * 0.5;
            Proposal::from_covariance(&sym)
        }
        None => {
            log::warn!("block {j}: Laplace precision is not positive definite, using c_j·λ·I");
            let fallback = match model.kernel().kind {
                KernelKind::Gaussian => kv,
                KernelKind::LogNormal => kv * curvature.mode[0].powi(2),
            };
            Proposal::isotropic(d, fallback)
        }
    }
}

fn exact_global(model: &ModelSpec) -> Option<GlobalUpdate> {
    match (model.kernel().kind, model.prior()) {
        (KernelKind::Gaussian, Prior::Gaussian { .. } | Prior::Uniform)
        | (KernelKind::LogNormal, Prior::LogNormal { .. } | Prior::Uniform) => {
            Some(GlobalUpdate::Exact)
        }
        _ => None,
    }
}

impl SweepKernels {
    pub fn prepare(
        model: &ModelSpec,
        lambda: f64,
        inner_steps: usize,
        spec: &ProposalSpec,
        curvature: Option<&BlockCurvature>,
        global_fallback_steps: Option<usize>,
    ) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::config("lambda", format!("{lambda} is not positive")));
        }
        if inner_steps == 0 {
            return Err(Error::config("inner_steps", "must be at least 1"));
        }
        let d = model.dim();
        let b = model.blocks();
        let local = if model.conjugacy() == Conjugacy::Generic {
            match spec {
                ProposalSpec::Laplace => {
                    let owned;
                    let curv = match curvature {
                        Some(c) => c,
                        None => {
                            owned = BlockCurvature::at_posterior_mode(model)?;
                            &owned
                        }
                    };
                    (0..b)
                        .map(|j| laplace_proposal(model, j, lambda, curv).map(Some))
                        .collect::<Result<Vec<_>>>()?
                }
                ProposalSpec::Isotropic(var) => {
                    let p = Proposal::isotropic(d, *var)?;
                    vec![Some(p); b]
                }
                ProposalSpec::Covariances(covs) => {
                    if covs.len() != b {
                        return Err(Error::config(
                            "proposal",
                            format!("{} covariances for {b} blocks", covs.len()),
                        ));
                    }
                    covs.iter()
                        .map(|c| {
                            if c.len() != d * d {
                                return Err(Error::config("proposal", "covariance must be d×d"));
                            }
                            Proposal::from_covariance(&DMatrix::from_row_slice(d, d, c)).map(Some)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            }
        } else {
            vec![None; b]
        };
        let global = match (exact_global(model), global_fallback_steps) {
            (Some(g), _) => g,
            (None, Some(steps)) if steps > 0 => {
                let total_prec: f64 = (0..b).map(|j| 1.0 / model.kernel().variance(j, lambda)).sum();
                let mut var = 1.0 / total_prec;
                if model.kernel().kind == KernelKind::LogNormal {
                    let zh = curvature
                        .map(|c| c.mode[0])
                        .unwrap_or_else(|| default_start(model)[0]);
                    var *= zh * zh;
                }
                GlobalUpdate::Rwm {
                    steps,
                    proposal: Proposal::isotropic(d, var * optimal_scale(d))?,
                }
            }
            _ => GlobalUpdate::Unavailable,
        };
        Ok(SweepKernels {
            lambda,
            inner_steps,
            local,
            global,
        })
    }

    /// Whether `z | x` is drawn exactly.
    pub fn exact_global(&self) -> bool {
        matches!(self.global, GlobalUpdate::Exact)
    }

    /// One full sweep; `rng_for(Some(j))` seeds block `j`, `rng_for(None)`
    /// the global update. Accepted proposals are added to `tally[j]`.
    pub fn sweep(
        &self,
        model: &ModelSpec,
        state: &mut InstrumentalState,
        rng_for: &(impl Fn(Option<usize>) -> StreamRng + Sync),
        parallel: bool,
        order: Option<&[usize]>,
        tally: &mut [usize],
    ) -> Result<SweepStats> {
        let d = model.dim();
        let z = state.z.clone();
        let mut local_accepted = 0;
        if parallel {
            let counts = state
                .x
                .par_chunks_mut(d)
                .enumerate()
                .map(|(j, xj)| {
                    let mut r = rng_for(Some(j));
                    update_local_block(model, j, &z, xj, self, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            for (t, c) in tally.iter_mut().zip(counts) {
                *t += c;
                local_accepted += c;
            }
        } else {
            let mut visit = |j: usize| -> Result<()> {
                let mut r = rng_for(Some(j));
                let c = update_local_block(model, j, &z, state.block_mut(j), self, &mut r)?;
                tally[j] += c;
                local_accepted += c;
                Ok(())
            };
            match order {
                Some(o) => o.iter().try_for_each(|&j| visit(j))?,
                None => (0..model.blocks()).try_for_each(visit)?,
            }
        }
        let mut r = rng_for(None);
        let global_accepted = update_global(model, state, self, &mut r)?;
        Ok(SweepStats {
            local_accepted,
            global_accepted,
        })
    }
}

/// Draw a new `x_j` from a kernel leaving `π̃_λ(x_j | z)` invariant.
/// Returns the number of accepted Metropolis proposals (0 for exact draws).
pub fn update_local_block<R: rand::Rng + ?Sized>(
    model: &ModelSpec,
    j: usize,
    z: &[f64],
    xj: &mut [f64],
    kernels: &SweepKernels,
    rng: &mut R,
) -> Result<usize> {
    let lambda = kernels.lambda;
    if let Some((m, s2)) = model.conjugate_block(j) {
        let k = model.kernel();
        let kv = k.variance(j, lambda);
        let g = k.to_gaussian_space(z[0]);
        let mean = (s2 * g + kv * m) / (s2 + kv);
        let sd = (kv * s2 / (s2 + kv)).sqrt();
        xj[0] = k.from_gaussian_space(mean + sd * standard_normal(rng));
        return Ok(0);
    }
    let proposal = kernels.local[j]
        .as_ref()
        .ok_or_else(|| Error::Unsupported(format!("no proposal configured for block {j}")))?;
    let mut target = |x: &[f64]| model.local_log_density(j, lambda, z, x);
    let mut lp = log_target_or_neg_inf(target(xj))?;
    if !lp.is_finite() {
        return Err(Error::Domain(format!("block {j} starts outside the support")));
    }
    let mut accepted = 0;
    for _ in 0..kernels.inner_steps {
        if rwm_step(xj, &mut lp, &mut target, proposal, rng)?.accepted {
            accepted += 1;
        }
    }
    Ok(accepted)
}

/// Gaussian parameters `(mean, var)` of `g(z_i) | x` per coordinate, in
/// kernel space, for a Gaussian or log-space Gaussian prior.
pub fn global_conditional(
    model: &ModelSpec,
    state: &InstrumentalState,
    lambda: f64,
) -> Result<Vec<(f64, f64)>> {
    let k = model.kernel();
    let b = model.blocks();
    let flat_shift = matches!(
        (k.kind, model.prior()),
        (KernelKind::LogNormal, Prior::Uniform)
    );
    (0..model.dim())
        .map(|i| {
            let (mut prec, mut lin) = match (model.prior(), k.kind) {
                (Prior::Gaussian { mean, var }, KernelKind::Gaussian) => {
                    (1.0 / var[i], mean[i] / var[i])
                }
                (Prior::LogNormal { location, scale }, KernelKind::LogNormal) => {
                    (1.0 / scale, location / scale)
                }
                (Prior::Uniform, _) => (0.0, 0.0),
                _ => {
                    return Err(Error::Unsupported(
                        "z has no closed-form conditional under this prior and kernel".into(),
                    ))
                }
            };
            for j in 0..b {
                let kv = k.variance(j, lambda);
                prec += 1.0 / kv;
                lin += k.to_gaussian_space(state.block(j)[i]) / kv;
            }
            let var = 1.0 / prec;
            let mean = var * lin + if flat_shift { var } else { 0.0 };
            Ok((mean, var))
        })
        .collect()
}

/// Draw `z` given all local blocks. Returns accepted RWM steps (0 if exact).
pub fn update_global<R: rand::Rng + ?Sized>(
    model: &ModelSpec,
    state: &mut InstrumentalState,
    kernels: &SweepKernels,
    rng: &mut R,
) -> Result<usize> {
    let lambda = kernels.lambda;
    match &kernels.global {
        GlobalUpdate::Exact => {
            let params = global_conditional(model, state, lambda)?;
            let k = model.kernel();
            for (zi, (mean, var)) in state.z.iter_mut().zip(params) {
                *zi = k.from_gaussian_space(mean + var.sqrt() * standard_normal(rng));
            }
            Ok(0)
        }
        GlobalUpdate::Rwm { steps, proposal } => {
            let x = state.x.clone();
            let b = model.blocks();
            let d = model.dim();
            let mut target = |z: &[f64]| -> Result<f64> {
                let mut lp = model.log_prior(z)?;
                for j in 0..b {
                    lp += model.kernel().log_density(j, lambda, z, &x[j * d..(j + 1) * d])?;
                }
                Ok(lp)
            };
            let mut lp = log_target_or_neg_inf(target(&state.z))?;
            let mut accepted = 0;
            for _ in 0..*steps {
                if rwm_step(&mut state.z, &mut lp, &mut target, proposal, rng)?.accepted {
                    accepted += 1;
                }
            }
            Ok(accepted)
        }
        GlobalUpdate::Unavailable => Err(Error::Unsupported(
            "z has no closed-form conditional and no RWM fallback is configured".into(),
        )),
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub z: Samples,
    /// Flat `N × b × d` local variables, when retained.
    pub x: Option<Vec<f64>>,
    /// Per-block acceptance rates; exact updates report 1.
    pub acceptance: Vec<f64>,
    pub global_acceptance: f64,
    pub seed: u64,
    pub lambda: f64,
    pub burn_in: usize,
    pub final_state: InstrumentalState,
}

/// Posterior mode with every local copy at the mode.
pub fn default_init(model: &ModelSpec) -> Result<InstrumentalState> {
    let fit = posterior_mode(model, &default_start(model))?;
    Ok(InstrumentalState::collapsed(fit.mode, model.blocks()))
}

pub fn run_chain(model: &ModelSpec, config: &GibbsConfig) -> Result<ChainOutput> {
    config.validate(model)?;
    let curvature = if model.conjugacy() == Conjugacy::Generic
        && config.proposal == ProposalSpec::Laplace
    {
        Some(BlockCurvature::at_posterior_mode(model)?)
    } else {
        None
    };
    let kernels = SweepKernels::prepare(
        model,
        config.lambda,
        config.inner_steps,
        &config.proposal,
        curvature.as_ref(),
        config.global_fallback_steps,
    )?;
    let mut state = match &config.init {
        Some(s) => s.clone(),
        None => match &curvature {
            Some(c) => InstrumentalState::collapsed(c.mode.clone(), model.blocks()),
            None => default_init(model)?,
        },
    };
    let n = config.chain_length;
    let b = model.blocks();
    let mut z = Samples::with_capacity(model.dim(), n);
    let mut x = config.keep_local.then(|| Vec::with_capacity(n * state.x.len()));
    let mut local_acc = vec![0usize; b];
    let mut global_acc = 0usize;
    let seed = config.seed;
    let exact_local: Vec<bool> = (0..b).map(|j| model.conjugate_block(j).is_some()).collect();
    for sweep in 0..n as u64 {
        let rng_for = |blk: Option<usize>| match blk {
            Some(j) => rng::stream(seed, Domain::Local, sweep, j as u64),
            None => rng::stream(seed, Domain::Global, sweep, 0),
        };
        let stats = kernels.sweep(
            model,
            &mut state,
            &rng_for,
            config.parallel,
            config.block_order.as_deref(),
            &mut local_acc,
        )?;
        global_acc += stats.global_accepted;
        z.push(&state.z);
        if let Some(x) = x.as_mut() {
            x.extend_from_slice(&state.x);
        }
    }
    let steps = (n * config.inner_steps) as f64;
    let acceptance = (0..b)
        .map(|j| if exact_local[j] { 1.0 } else { local_acc[j] as f64 / steps })
        .collect();
    let global_acceptance = match config.global_fallback_steps {
        Some(s) if !kernels.exact_global() => global_acc as f64 / (n * s) as f64,
        _ => 1.0,
    };
    Ok(ChainOutput {
        z,
        x,
        acceptance,
        global_acceptance,
        seed,
        lambda: config.lambda,
        burn_in: config.burn_in,
        final_state: state,
    })
}

/// `(1/N) Σ φ(Z^i)` over the chain after the configured burn-in.
pub fn estimate(chain: &ChainOutput, phi: TestFunction) -> Result<Vec<f64>> {
    estimate_from(&chain.z, phi, chain.burn_in)
}

pub fn estimate_from(z: &Samples, phi: TestFunction, burn_in: usize) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::config("chain", "empty chain"));
    }
    if burn_in >= z.len() {
        return Err(Error::config(
            "burn_in",
            format!("{burn_in} discards the whole chain of {}", z.len()),
        ));
    }
    let d = z.dim();
    let mut sum = vec![0.0; phi.dim(d)];
    let mut buf = vec![0.0; phi.dim(d)];
    for row in z.rows().skip(burn_in) {
        phi.apply(row, &mut buf)?;
        for (s, v) in sum.iter_mut().zip(&buf) {
            *s += v;
        }
    }
    let n = (z.len() - burn_in) as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

pub fn write_chain_csv(path: &Path, chain: &ChainOutput) -> Result<()> {
    write_samples_csv(path, &chain.z)
}

/// One row per draw: `sweep,z_0,…`.
pub fn write_samples_csv(path: &Path, z: &Samples) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sweep".to_string()];
    header.extend((0..z.dim()).map(|i| format!("z_{i}")));
    w.write_record(&header)?;
    for (i, row) in z.rows().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChainSummary {
    pub acceptance: Vec<f64>,
    pub seed: u64,
    pub lambda: f64,
}

pub fn write_chain_summary(path: &Path, chain: &ChainOutput) -> Result<()> {
    let summary = ChainSummary {
        acceptance: chain.acceptance.clone(),
        seed: chain.seed,
        lambda: chain.lambda,
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KernelFamily, PartialLikelihood};

    fn toy(mu0: f64, v0: Option<f64>, blocks: &[(f64, f64)], scales: Vec<f64>) -> ModelSpec {
        let prior = match v0 {
            Some(v) => Prior::Gaussian {
                mean: vec![mu0],
                var: vec![v],
            },
            None => Prior::Uniform,
        };
        ModelSpec::new(
            1,
            prior,
            blocks
                .iter()
                .map(|&(mean, var)| PartialLikelihood::Gaussian { mean, var })
                .collect(),
            KernelFamily::new(KernelKind::Gaussian, scales).unwrap(),
        )
        .unwrap()
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn conjugate_local_draw_has_closed_form_moments() {
        let model = toy(0.0, Some(1.0), &[(2.0, 1.0)], vec![1.0]);
        let k = SweepKernels::prepare(&model, 1.0, 1, &ProposalSpec::Laplace, None, None).unwrap();
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|i| {
                let mut x = [0.0];
                let mut r = rng::stream(1, Domain::Local, i, 0);
                update_local_block(&model, 0, &[0.0], &mut x, &k, &mut r).unwrap();
                x[0]
            })
            .collect();
        let (m, v) = moments(&draws);
        let se_m = (0.5f64 / n as f64).sqrt();
        let se_v = 0.5 * (2.0f64 / n as f64).sqrt();
        assert!((m - 1.0).abs() < 3.0 * se_m, "mean {m}");
        assert!((v - 0.5).abs() < 3.0 * se_v, "var {v}");
    }

    #[test]
    fn large_lambda_local_conditional_approaches_the_likelihood() {
        let model = toy(0.0, Some(1.0), &[(2.0, 0.7)], vec![1.0]);
        let lambda = 1e12;
        let kv = lambda;
        let (s2, m, z): (f64, f64, f64) = (0.7, 2.0, 5.0);
        let mean = (s2 * z + kv * m) / (s2 + kv);
        let var = kv * s2 / (s2 + kv);
        assert!((mean - m).abs() < 1e-9 && (var - s2).abs() < 1e-9);
        let k = SweepKernels::prepare(&model, lambda, 1, &ProposalSpec::Laplace, None, None).unwrap();
        let mut x = [0.0];
        let mut r = rng::stream(2, Domain::Local, 0, 0);
        update_local_block(&model, 0, &[z], &mut x, &k, &mut r).unwrap();
        assert!((x[0] - m).abs() < 6.0 * s2.sqrt());
    }

    #[test]
    fn generic_local_update_matches_conjugate_moments() {
        let model = toy(0.0, Some(1.0), &[(2.0, 1.0)], vec![1.0])
            .with_conjugacy(Conjugacy::Generic)
            .unwrap();
        let k = SweepKernels::prepare(&model, 1.0, 50, &ProposalSpec::Laplace, None, None).unwrap();
        let n = 20_000u64;
        let draws: Vec<f64> = (0..n)
            .map(|i| {
                let mut x = [0.0];
                let mut r = rng::stream(3, Domain::Local, i, 0);
                update_local_block(&model, 0, &[0.0], &mut x, &k, &mut r).unwrap();
                x[0]
            })
            .collect();
        let (m, v) = moments(&draws);
        let se_m = (0.5f64 / n as f64).sqrt();
        let se_v = 0.5 * (2.0f64 / n as f64).sqrt();
        assert!((m - 1.0).abs() < 3.0 * se_m, "mean {m}");
        assert!((v - 0.5).abs() < 3.0 * se_v, "var {v}");
    }

    #[test]
    fn zero_inner_steps_is_rejected() {
        let model = toy(0.0, Some(1.0), &[(2.0, 1.0)], vec![1.0]);
        let mut cfg = GibbsConfig::new(1.0, 10, 0);
        cfg.inner_steps = 0;
        assert!(matches!(run_chain(&model, &cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn uniform_prior_global_conditional() {
        let model = toy(0.0, None, &[(0.0, 1.0), (0.0, 1.0)], vec![1.0, 1.0]);
        let state = InstrumentalState::new(vec![0.0], vec![0.0, 2.0]);
        let p = global_conditional(&model, &state, 1.0).unwrap();
        assert!((p[0].0 - 1.0).abs() < 1e-15 && (p[0].1 - 0.5).abs() < 1e-15);
        let k = SweepKernels::prepare(&model, 1.0, 1, &ProposalSpec::Laplace, None, None).unwrap();
        let n = 100_000u64;
        let draws: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = state.clone();
                let mut r = rng::stream(4, Domain::Global, i, 0);
                update_global(&model, &mut s, &k, &mut r).unwrap();
                s.z[0]
            })
            .collect();
        let (m, v) = moments(&draws);
        assert!((m - 1.0).abs() < 3.0 * (0.5f64 / n as f64).sqrt());
        assert!((v - 0.5).abs() < 3.0 * 0.5 * (2.0f64 / n as f64).sqrt());
    }

    #[test]
    fn global_mean_is_prior_mean_when_x_sits_there() {
        let model = toy(1.7, Some(2.0), &[(0.0, 1.0)], vec![3.0]);
        let state = InstrumentalState::new(vec![0.0], vec![1.7]);
        for &lambda in &[0.01, 1.0, 50.0] {
            let p = global_conditional(&model, &state, lambda).unwrap();
            assert!((p[0].0 - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn vague_prior_conditional_approaches_uniform() {
        let vague = toy(0.0, Some(1e14), &[(0.0, 1.0), (0.0, 1.0)], vec![1.0, 2.0]);
        let flat = toy(0.0, None, &[(0.0, 1.0), (0.0, 1.0)], vec![1.0, 2.0]);
        let state = InstrumentalState::new(vec![0.0], vec![0.3, 1.9]);
        let a = global_conditional(&vague, &state, 0.7).unwrap()[0];
        let b = global_conditional(&flat, &state, 0.7).unwrap()[0];
        assert!((a.0 - b.0).abs() < 1e-10 && (a.1 - b.1).abs() < 1e-10);
    }

    #[test]
    fn non_gaussian_prior_needs_a_fallback() {
        let model = ModelSpec::new(
            1,
            Prior::LogNormal {
                location: 0.0,
                scale: 1.0,
            },
            vec![PartialLikelihood::Gaussian { mean: 1.0, var: 1.0 }],
            KernelFamily::new(KernelKind::Gaussian, vec![1.0]).unwrap(),
        )
        .unwrap();
        let cfg = GibbsConfig::new(0.1, 5, 0);
        assert!(matches!(run_chain(&model, &cfg), Err(Error::Unsupported(_))));
        let mut cfg = GibbsConfig::new(0.1, 2000, 0);
        cfg.global_fallback_steps = Some(5);
        let out = run_chain(&model, &cfg).unwrap();
        assert!(out.z.rows().all(|r| r[0] > 0.0));
        assert!(out.global_acceptance > 0.0 && out.global_acceptance < 1.0);
    }

    #[test]
    fn chain_is_deterministic_and_parallel_matches_serial() {
        let model = toy(0.0, Some(1.0), &[(1.0, 1.0), (2.0, 0.5), (-1.0, 2.0)], vec![1.0; 3])
            .with_conjugacy(Conjugacy::Generic)
            .unwrap();
        let mut cfg = GibbsConfig::new(0.5, 200, 77);
        cfg.inner_steps = 3;
        let a = run_chain(&model, &cfg).unwrap();
        let b = run_chain(&model, &cfg).unwrap();
        assert_eq!(a.z, b.z);
        cfg.parallel = true;
        let c = run_chain(&model, &cfg).unwrap();
        assert_eq!(a.z, c.z);
        assert_eq!(a.acceptance, c.acceptance);
        assert!(a.acceptance.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn single_sweep_chain() {
        let model = toy(0.0, Some(1.0), &[(1.0, 1.0)], vec![1.0]);
        let mut cfg = GibbsConfig::new(1.0, 1, 3);
        cfg.keep_local = true;
        let out = run_chain(&model, &cfg).unwrap();
        assert_eq!(out.z.len(), 1);
        assert_eq!(out.x.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn estimate_of_a_constant_and_burn_in_errors() {
        let model = toy(0.0, Some(1.0), &[(1.0, 1.0)], vec![1.0]);
        let out = run_chain(&model, &GibbsConfig::new(1.0, 50, 3)).unwrap();
        let ones = estimate(&out, TestFunction::Power(0)).unwrap();
        assert_eq!(ones, vec![1.0]);
        assert!(estimate_from(&out.z, TestFunction::Identity, 50).is_err());
    }

    #[test]
    fn csv_and_summary_formats() {
        let model = toy(0.0, Some(1.0), &[(1.0, 1.0)], vec![1.0]);
        let out = run_chain(&model, &GibbsConfig::new(1.0, 3, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("chain.csv");
        write_chain_csv(&p, &out).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("sweep,z_0\n0,"));
        assert_eq!(text.lines().count(), 4);
        let s = dir.path().join("summary.json");
        write_chain_summary(&s, &out).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&s).unwrap()).unwrap();
        assert_eq!(v["seed"], 9);
        assert_eq!(v["lambda"], 1.0);
        assert_eq!(v["acceptance"][0], 1.0);
    }
}
