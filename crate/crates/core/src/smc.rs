//! SMC sampler over a decreasing sequence of `λ`.
//!
//! Each step reweights the particles by `π̃_{λ_p}/π̃_{λ_{p-1}}` (a ratio of
//! kernel densities only), resamples multinomially when the ESS falls below
//! a threshold, and moves every particle with the Gibbs kernel at `λ_p`.
//! Eve indices (time-0 ancestors) feed the genealogy variance estimator.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::autocorrelation;
use crate::error::{Error, Result};
use crate::gibbs::{
    default_init, update_local_block, BlockCurvature, ProposalSpec, SweepKernels,
};
use crate::model::{Conjugacy, InstrumentalState, KernelKind, ModelSpec, Prior};
use crate::regression::{stopping_rule_step, Decision, Point, RegressionInput, StoppingState};
use crate::rng::{self, standard_normal, uniform, Domain};
use crate::test_fn::TestFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `λ_1, λ_2, …` after `λ_0`.
    FixedSequence(Vec<f64>),
    Adaptive { cess_star: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lambda0: f64,
    pub mode: ScheduleMode,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Resample when ESS < `ess_threshold · N`.
    #[serde(default = "default_ess_threshold")]
    pub ess_threshold: f64,
}

fn default_lambda_min() -> f64 {
    1e-8
}
fn default_max_steps() -> usize {
    500
}
fn default_ess_threshold() -> f64 {
    0.5
}

impl ScheduleConfig {
    pub fn adaptive(lambda0: f64, cess_star: f64) -> Self {
        ScheduleConfig {
            lambda0,
            mode: ScheduleMode::Adaptive { cess_star },
            lambda_min: default_lambda_min(),
            max_steps: default_max_steps(),
            ess_threshold: default_ess_threshold(),
        }
    }

    pub fn fixed(lambda0: f64, rest: Vec<f64>) -> Self {
        let max_steps = rest.len();
        ScheduleConfig {
            lambda0,
            mode: ScheduleMode::FixedSequence(rest),
            lambda_min: default_lambda_min(),
            max_steps,
            ess_threshold: default_ess_threshold(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::config("lambda0", "must be positive and finite"));
        }
        if !(self.lambda_min > 0.0) {
            return Err(Error::config("lambda_min", "must be positive"));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            return Err(Error::config("ess_threshold", "must lie in (0, 1]"));
        }
        match &self.mode {
            ScheduleMode::Adaptive { cess_star } => {
                if !(*cess_star > 0.0 && *cess_star < 1.0) {
                    return Err(Error::config("cess_star", "must lie in (0, 1)"));
                }
                if !(self.lambda_min < self.lambda0) {
                    return Err(Error::config("lambda_min", "must be below lambda0"));
                }
            }
            ScheduleMode::FixedSequence(seq) => {
                let mut prev = self.lambda0;
                for &l in seq {
                    if !(l < prev) {
                        return Err(Error::NonDecreasingSchedule { prev, next: l });
                    }
                    if !(l > 0.0) {
                        return Err(Error::config("schedule", format!("{l} is not positive")));
                    }
                    prev = l;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Exact draws when the model allows them, otherwise thinning.
    #[default]
    Auto,
    Exact,
    Thinned,
}

#[derive(Debug, Clone)]
pub struct SmcConfig {
    pub schedule: ScheduleConfig,
    pub particles: usize,
    /// Gibbs sweeps per move step.
    pub moves: usize,
    /// RWM iterations per local block update (generic models).
    pub inner_steps: usize,
    pub proposal: ProposalSpec,
    pub global_fallback_steps: Option<usize>,
    pub phi: TestFunction,
    pub seed: u64,
    pub init: InitMethod,
    pub parallel: bool,
}

impl SmcConfig {
    pub fn new(schedule: ScheduleConfig, particles: usize, phi: TestFunction, seed: u64) -> Self {
        SmcConfig {
            schedule,
            particles,
            moves: 1,
            inner_steps: 1,
            proposal: ProposalSpec::Laplace,
            global_fallback_steps: None,
            phi,
            seed,
            init: InitMethod::Auto,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.particles < 2 {
            return Err(Error::config("particles", "at least two particles are required"));
        }
        if self.moves == 0 {
            return Err(Error::config("moves", "must be at least 1"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("inner_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// `N` weighted particles and their genealogy.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub particles: Vec<InstrumentalState>,
    /// Normalised to sum to one.
    pub weights: Vec<f64>,
    pub lambda: f64,
    /// Time-0 ancestor of each particle, 0-based.
    pub eves: Vec<usize>,
    pub resampling_count: usize,
    pub step: usize,
}

impl ParticleSystem {
    pub fn new(particles: Vec<InstrumentalState>, lambda: f64) -> Self {
        let n = particles.len();
        ParticleSystem {
            particles,
            weights: vec![1.0 / n as f64; n],
            lambda,
            eves: (0..n).collect(),
            resampling_count: 0,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.weights)
    }

    pub fn distinct_eves(&self) -> usize {
        let mut seen = vec![false; self.len()];
        self.eves.iter().filter(|&&e| !std::mem::replace(&mut seen[e], true)).count()
    }

    /// `Σ_i W^i φ(Z^i)` with normalised weights.
    pub fn estimate(&self, phi: TestFunction) -> Result<Vec<f64>> {
        let d = phi.dim(self.particles[0].z.len());
        let mut eta = vec![0.0; d];
        let mut buf = vec![0.0; d];
        for (p, w) in self.particles.iter().zip(&self.weights) {
            phi.apply(&p.z, &mut buf)?;
            for (e, v) in eta.iter_mut().zip(&buf) {
                *e += w * v;
            }
        }
        Ok(eta)
    }

    /// Apply ancestor indices: copy particles and eves, reset weights.
    pub fn resample_with(&mut self, ancestors: &[usize]) {
        let n = self.len() as f64;
        self.particles = ancestors.iter().map(|&a| self.particles[a].clone()).collect();
        self.eves = ancestors.iter().map(|&a| self.eves[a]).collect();
        self.weights = vec![1.0 / n; ancestors.len()];
        self.resampling_count += 1;
    }
}

/// `Σ_j [log K_j^(λ_new)(z, x_j) − log K_j^(λ_prev)(z, x_j)]`; the prior and
/// likelihood cancel and are never evaluated.
pub fn incremental_log_weight(
    model: &ModelSpec,
    state: &InstrumentalState,
    lambda_prev: f64,
    lambda_new: f64,
) -> Result<f64> {
    if !(lambda_new < lambda_prev) {
        return Err(Error::NonDecreasingSchedule {
            prev: lambda_prev,
            next: lambda_new,
        });
    }
    let k = model.kernel();
    let mut lw = 0.0;
    for j in 0..model.blocks() {
        let xj = state.block(j);
        lw += k.log_density(j, lambda_new, &state.z, xj)? - k.log_density(j, lambda_prev, &state.z, xj)?;
    }
    Ok(lw)
}

/// `Σ_j ‖g(x_j) − g(z)‖² / c_j`: the only particle statistic the weights need.
fn kernel_statistic(model: &ModelSpec, state: &InstrumentalState) -> f64 {
    let k = model.kernel();
    (0..model.blocks())
        .map(|j| k.sq_distance(&state.z, state.block(j)) / k.scales[j])
        .sum()
}

/// Closed form of [`incremental_log_weight`] in terms of the statistic above.
#[inline]
fn log_weight_from_stat(stat: f64, half_db: f64, lambda_prev: f64, lambda_new: f64) -> f64 {
    -half_db * (lambda_new / lambda_prev).ln() - 0.5 * stat * (1.0 / lambda_new - 1.0 / lambda_prev)
}

pub fn ess(weights: &[f64]) -> Result<f64> {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::DegenerateWeights("all weights are zero".into()));
    }
    Ok(s * s / s2)
}

/// Conditional ESS `N (Σ W w)² / Σ W w²` for normalised `W`.
pub fn cess(prev: &[f64], incremental: &[f64]) -> Result<f64> {
    let a: f64 = prev.iter().zip(incremental).map(|(w, v)| w * v).sum();
    let b: f64 = prev.iter().zip(incremental).map(|(w, v)| w * v * v).sum();
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::DegenerateWeights("incremental weights vanish".into()));
    }
    Ok(prev.len() as f64 * a * a / b)
}

/// [`cess`] from log incremental weights, shifted for stability.
fn cess_log(prev: &[f64], log_incr: &[f64]) -> f64 {
    let top = log_incr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut a, mut b) = (0.0, 0.0);
    for (w, l) in prev.iter().zip(log_incr) {
        let e = (l - top).exp();
        a += w * e;
        b += w * e * e;
    }
    if b > 0.0 {
        prev.len() as f64 * a * a / b
    } else {
        0.0
    }
}

const BISECTION_REL_TOL: f64 = 1e-6;
const FALLBACK_DECREMENT: f64 = 1e-3;

/// The `λ` whose CESS equals `cess_star · N`, by bisection on `log λ`.
pub fn next_lambda(
    system: &ParticleSystem,
    model: &ModelSpec,
    cess_star: f64,
    lambda_min: f64,
) -> Result<f64> {
    let lp = system.lambda;
    if !(lp > lambda_min) {
        return Err(Error::config("lambda_min", "the current lambda is already at the floor"));
    }
    let stats: Vec<f64> = system.particles.iter().map(|p| kernel_statistic(model, p)).collect();
    let half_db = 0.5 * (model.dim() * model.blocks()) as f64;
    let target = cess_star * system.len() as f64;
    let mut lw = vec![0.0; stats.len()];
    let mut cess_at = |l: f64| {
        for (o, s) in lw.iter_mut().zip(&stats) {
            *o = log_weight_from_stat(*s, half_db, lp, l);
        }
        cess_log(&system.weights, &lw)
    };
    if cess_at(lambda_min) >= target {
        return Ok(lambda_min);
    }
    let (mut lo, mut hi) = (lambda_min.ln(), lp.ln());
    let top = hi;
    while hi - lo > BISECTION_REL_TOL {
        let mid = 0.5 * (lo + hi);
        if cess_at(mid.exp()) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if hi == top {
        log::warn!("CESS falls below target immediately below lambda = {lp}; taking a small step");
        return Ok(lp * (1.0 - FALLBACK_DECREMENT));
    }
    Ok(hi.exp())
}

/// `N` i.i.d. categorical draws proportional to `weights`.
pub fn resample_multinomial<R: rand::Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights("cannot resample zero weights".into()));
    }
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cum.push(acc);
    }
    let last = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
    Ok((0..weights.len())
        .map(|_| {
            let u = uniform(rng);
            cum.partition_point(|&c| c <= u).min(last)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub values: Vec<f64>,
    /// Every particle descends from one eve; the estimate is identically 0.
    pub degenerate: bool,
}

/// Genealogy estimate of `lim N·Var(π^N_λ(φ))` per component.
///
/// With mean-one weights `W̃`, centred `ψ = φ − π^N(φ)` and
/// `S_e = Σ_{i: E^i = e} W̃^i ψ(Z^i)`, the estimate is
/// `(N/(N−1))^{r+1} Σ_e S_e² / N`, `r` the number of resampling events.
pub fn asymptotic_variance_estimate(system: &ParticleSystem, phi: TestFunction) -> Result<VarianceEstimate> {
    let eta = system.estimate(phi)?;
    let d = eta.len();
    if system.distinct_eves() == 1 {
        log::warn!("all particles share one eve index; variance estimate is zero");
        return Ok(VarianceEstimate {
            values: vec![0.0; d],
            degenerate: true,
        });
    }
    let n = system.len();
    let nf = n as f64;
    let mut sums = vec![0.0; n * d];
    let mut buf = vec![0.0; d];
    for ((p, w), &e) in system.particles.iter().zip(&system.weights).zip(&system.eves) {
        phi.apply(&p.z, &mut buf)?;
        for c in 0..d {
            sums[e * d + c] += nf * w * (buf[c] - eta[c]);
        }
    }
    let factor = (nf / (nf - 1.0)).powi(system.resampling_count as i32 + 1);
    let values = (0..d)
        .map(|c| factor * (0..n).map(|e| sums[e * d + c].powi(2)).sum::<f64>() / nf)
        .collect();
    Ok(VarianceEstimate {
        values,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: f64,
    pub ess: f64,
    pub resampled: bool,
    pub eta: Vec<f64>,
    /// Asymptotic variance estimate (not divided by `N`).
    pub var: Vec<f64>,
    pub degenerate: bool,
    pub distinct_eves: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SmcTrace {
    pub records: Vec<StepRecord>,
}

impl SmcTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// One regression input per component of `φ`.
    pub fn regression_inputs(&self) -> Result<Vec<RegressionInput>> {
        let d = self.records.first().map_or(0, |r| r.eta.len());
        (0..d)
            .map(|c| {
                RegressionInput::new(
                    self.records
                        .iter()
                        .map(|r| Point {
                            lambda: r.lambda,
                            eta: r.eta[c],
                            v: r.var[c],
                        })
                        .collect(),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SmcOutput {
    pub trace: SmcTrace,
    pub system: ParticleSystem,
    /// Thinning interval when particles were initialised from a chain.
    pub init_thinning: Option<usize>,
    /// Stopping-rule bookkeeping, when run with a stopping rule.
    pub stopping: Option<StoppingState>,
}

/// `(mean, var)` of `g(z)` under `π_λ` in kernel space, when it is Gaussian.
pub fn exact_marginal(model: &ModelSpec, lambda: f64) -> Option<(f64, f64)> {
    if model.conjugacy() == Conjugacy::Generic || model.dim() != 1 {
        return None;
    }
    let k = model.kernel();
    let (mut prec, mut lin, flat_shift) = match (model.prior(), k.kind) {
        (Prior::Gaussian { mean, var }, KernelKind::Gaussian) => (1.0 / var[0], mean[0] / var[0], false),
        (Prior::LogNormal { location, scale }, KernelKind::LogNormal) => (1.0 / scale, location / scale, false),
        (Prior::Uniform, kind) => (0.0, 0.0, kind == KernelKind::LogNormal),
        _ => return None,
    };
    for j in 0..model.blocks() {
        let (m, s2) = model.conjugate_block(j)?;
        let v = s2 + k.variance(j, lambda);
        prec += 1.0 / v;
        lin += m / v;
    }
    let var = 1.0 / prec;
    Some((var * lin + if flat_shift { var } else { 0.0 }, var))
}

/// Largest lag searched when choosing the thinning interval.
const MAX_THIN: usize = 1000;
const THIN_ACF: f64 = 0.05;

fn prepare_kernels(
    model: &ModelSpec,
    config: &SmcConfig,
    lambda: f64,
    curvature: Option<&BlockCurvature>,
) -> Result<SweepKernels> {
    SweepKernels::prepare(
        model,
        lambda,
        config.inner_steps,
        &config.proposal,
        curvature,
        config.global_fallback_steps,
    )
}

fn sweep_particle(
    model: &ModelSpec,
    kernels: &SweepKernels,
    state: &mut InstrumentalState,
    seed: u64,
    domain: Domain,
    major: u64,
    slot: u64,
) -> Result<()> {
    let b = model.blocks() as u64;
    let rng_for = |blk: Option<usize>| {
        let j = blk.map_or(b, |j| j as u64);
        rng::stream(seed, domain, major, slot * (b + 1) + j)
    };
    let mut tally = vec![0usize; model.blocks()];
    kernels.sweep(model, state, &rng_for, false, None, &mut tally)?;
    Ok(())
}

fn exact_particles(model: &ModelSpec, config: &SmcConfig, kernels: &SweepKernels) -> Result<Vec<InstrumentalState>> {
    let (mean, var) = exact_marginal(model, config.schedule.lambda0)
        .ok_or_else(|| Error::Unsupported("exact initialisation needs a conjugate model".into()))?;
    let k = model.kernel();
    let b = model.blocks();
    let draw = |i: usize| -> Result<InstrumentalState> {
        let mut r = rng::stream(config.seed, Domain::Init, i as u64, b as u64);
        let z = vec![k.from_gaussian_space(mean + var.sqrt() * standard_normal(&mut r))];
        let mut state = InstrumentalState::collapsed(z, b);
        for j in 0..b {
            let mut r = rng::stream(config.seed, Domain::Init, i as u64, j as u64);
            let z = state.z.clone();
            update_local_block(model, j, &z, state.block_mut(j), kernels, &mut r)?;
        }
        Ok(state)
    };
    if config.parallel {
        (0..config.particles).into_par_iter().map(draw).collect()
    } else {
        (0..config.particles).map(draw).collect()
    }
}

/// Thin a `λ_0` Gibbs chain. The interval is the first lag at which every
/// component of `φ` has autocorrelation below 0.05 in a pilot run.
fn thinned_particles(
    model: &ModelSpec,
    config: &SmcConfig,
    kernels: &SweepKernels,
) -> Result<(Vec<InstrumentalState>, usize)> {
    let mut state = default_init(model)?;
    let pilot_len = (20 * MAX_THIN).max(config.particles);
    let mut trace: Vec<Vec<f64>> = Vec::with_capacity(pilot_len);
    for s in 0..pilot_len as u64 {
        sweep_particle(model, kernels, &mut state, config.seed, Domain::Pilot, s, 0)?;
        trace.push(config.phi.eval(&state.z)?);
    }
    let d = trace[0].len();
    let mut thin = 1;
    for c in 0..d {
        let series: Vec<f64> = trace.iter().map(|r| r[c]).collect();
        let acf = autocorrelation(&series, MAX_THIN);
        let lag = acf.iter().skip(1).position(|a| a.abs() < THIN_ACF).map(|p| p + 1);
        match lag {
            Some(l) => thin = thin.max(l),
            None => {
                log::warn!("phi component {c} stays correlated beyond lag {MAX_THIN}");
                thin = MAX_THIN;
            }
        }
    }
    let mut out = Vec::with_capacity(config.particles);
    let mut sweep = 0u64;
    while out.len() < config.particles {
        for _ in 0..thin {
            sweep_particle(model, kernels, &mut state, config.seed, Domain::Init, sweep, 0)?;
            sweep += 1;
        }
        out.push(state.clone());
    }
    Ok((out, thin))
}

/// Particles targeting `π̃_{λ_0}` with uniform weights.
pub fn initial_system(
    model: &ModelSpec,
    config: &SmcConfig,
    curvature: Option<&BlockCurvature>,
) -> Result<(ParticleSystem, Option<usize>)> {
    let lambda0 = config.schedule.lambda0;
    let kernels = prepare_kernels(model, config, lambda0, curvature)?;
    let exact = exact_marginal(model, lambda0).is_some();
    let (particles, thin) = match (config.init, exact) {
        (InitMethod::Exact, false) => {
            return Err(Error::Unsupported("exact initialisation needs a conjugate model".into()))
        }
        (InitMethod::Exact | InitMethod::Auto, true) => (exact_particles(model, config, &kernels)?, None),
        _ => {
            let (p, t) = thinned_particles(model, config, &kernels)?;
            (p, Some(t))
        }
    };
    Ok((ParticleSystem::new(particles, lambda0), thin))
}

fn record(system: &ParticleSystem, phi: TestFunction, resampled: bool, ess_value: f64) -> Result<StepRecord> {
    let eta = system.estimate(phi)?;
    let v = asymptotic_variance_estimate(system, phi)?;
    Ok(StepRecord {
        step: system.step,
        lambda: system.lambda,
        ess: ess_value,
        resampled,
        eta,
        var: v.values,
        degenerate: v.degenerate,
        distinct_eves: system.distinct_eves(),
    })
}

/// Reweight, optionally resample and move: one step to `λ_new`.
fn advance(
    model: &ModelSpec,
    config: &SmcConfig,
    system: &mut ParticleSystem,
    lambda_new: f64,
    curvature: Option<&BlockCurvature>,
) -> Result<(bool, f64)> {
    let lp = system.lambda;
    if !(lambda_new < lp) {
        return Err(Error::NonDecreasingSchedule { prev: lp, next: lambda_new });
    }
    let half_db = 0.5 * (model.dim() * model.blocks()) as f64;
    let lw: Vec<f64> = system
        .particles
        .iter()
        .zip(&system.weights)
        .map(|(p, w)| w.ln() + log_weight_from_stat(kernel_statistic(model, p), half_db, lp, lambda_new))
        .collect();
    let top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::DegenerateWeights(format!(
            "total weight underflowed at step {} (lambda {lambda_new})",
            system.step + 1
        )));
    }
    let mut w: Vec<f64> = lw.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    system.weights = w;
    system.lambda = lambda_new;
    system.step += 1;
    let step_ess = ess(&system.weights)?;
    let n = system.len() as f64;
    let resampled = step_ess < config.schedule.ess_threshold * n;
    if resampled {
        let mut r = rng::stream(config.seed, Domain::Resample, system.step as u64, 0);
        let ancestors = resample_multinomial(&system.weights, &mut r)?;
        system.resample_with(&ancestors);
    }
    let kernels = prepare_kernels(model, config, lambda_new, curvature)?;
    let step = system.step as u64;
    let seed = config.seed;
    let moves = config.moves as u64;
    let np = system.len() as u64;
    let move_one = |(i, p): (usize, &mut InstrumentalState)| -> Result<()> {
        for m in 0..moves {
            sweep_particle(model, &kernels, p, seed, Domain::Move, step, m * np + i as u64)?;
        }
        Ok(())
    };
    if config.parallel {
        system.particles.par_iter_mut().enumerate().try_for_each(move_one)?;
    } else {
        system.particles.iter_mut().enumerate().try_for_each(move_one)?;
    }
    Ok((resampled, step_ess))
}

fn drive(model: &ModelSpec, config: &SmcConfig, kappa: Option<usize>) -> Result<SmcOutput> {
    config.validate()?;
    let curvature = if model.conjugacy() == Conjugacy::Generic && config.proposal == ProposalSpec::Laplace {
        Some(BlockCurvature::at_posterior_mode(model)?)
    } else {
        None
    };
    let (mut system, init_thinning) = initial_system(model, config, curvature.as_ref())?;
    let first = record(&system, config.phi, false, system.ess()?)?;
    let d = first.eta.len();
    let mut trace = SmcTrace { records: vec![first] };
    let mut stopping = kappa.map(|k| StoppingState::new(k, d)).transpose()?;
    let mut inputs: Vec<RegressionInput> = vec![RegressionInput::default(); d];
    let mut observe = |rec: &StepRecord, stopping: &mut Option<StoppingState>| -> Result<bool> {
        let Some(state) = stopping.as_mut() else {
            return Ok(false);
        };
        for (c, inp) in inputs.iter_mut().enumerate() {
            inp.points.push(Point {
                lambda: rec.lambda,
                eta: rec.eta[c],
                v: rec.var[c],
            });
        }
        Ok(matches!(stopping_rule_step(state, &inputs)?, Decision::Stop { .. }))
    };
    let mut done = observe(&trace.records[0], &mut stopping)?;
    let sched = &config.schedule;
    while !done && system.step < sched.max_steps {
        let lambda_new = match &sched.mode {
            ScheduleMode::FixedSequence(seq) => match seq.get(system.step) {
                Some(&l) => l,
                None => break,
            },
            ScheduleMode::Adaptive { cess_star } => {
                if system.lambda <= sched.lambda_min {
                    break;
                }
                next_lambda(&system, model, *cess_star, sched.lambda_min)?
            }
        };
        let (resampled, step_ess) = advance(model, config, &mut system, lambda_new, curvature.as_ref())?;
        let rec = record(&system, config.phi, resampled, step_ess)?;
        done = observe(&rec, &mut stopping)?;
        trace.records.push(rec);
    }
    Ok(SmcOutput {
        trace,
        system,
        init_thinning,
        stopping,
    })
}

pub fn run_smc(model: &ModelSpec, config: &SmcConfig) -> Result<SmcOutput> {
    drive(model, config, None)
}

/// As [`run_smc`], terminating once the stopping rule with parameter `kappa` fires.
pub fn run_smc_with_stopping(model: &ModelSpec, config: &SmcConfig, kappa: usize) -> Result<SmcOutput> {
    drive(model, config, Some(kappa))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_trace_csv(path: &Path, trace: &SmcTrace) -> Result<()> {
    let mut f = create(path)?;
    let d = trace.records.first().map_or(0, |r| r.eta.len());
    let mut header = String::from("step,lambda,ess,resampled");
    (0..d).for_each(|c| header.push_str(&format!(",eta_{c}")));
    (0..d).for_each(|c| header.push_str(&format!(",var_{c}")));
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for r in &trace.records {
        let mut line = format!("{},{:e},{:e},{}", r.step, r.lambda, r.ess, r.resampled as u8);
        for v in r.eta.iter().chain(&r.var) {
            line.push_str(&format!(",{v:e}"));
        }
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn write_particles_csv(path: &Path, system: &ParticleSystem) -> Result<()> {
    let mut f = create(path)?;
    let d = system.particles.first().map_or(0, |p| p.z.len());
    let mut header = String::from("particle,weight,eve");
    (0..d).for_each(|c| header.push_str(&format!(",z_{c}")));
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for (i, ((p, w), e)) in system.particles.iter().zip(&system.weights).zip(&system.eves).enumerate() {
        let mut line = format!("{i},{w:e},{e}");
        for v in &p.z {
            line.push_str(&format!(",{v:e}"));
        }
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
