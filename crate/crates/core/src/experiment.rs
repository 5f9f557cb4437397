//! Experiment driver: replicated runs of any sampler with per-replicate
//! artifacts and a summary against the analytic truth, budgeted
//! comparisons against a ground-truth chain, and oracle queries.
//!
//! Layout of a run directory:
//!
//! ```text
//! out/config.resolved.json
//! out/replicate_<r>/replicate.json   seed, config and estimates
//! out/replicate_<r>/*.csv            chains, traces, particles
//! out/summary.json
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cluster::{self, Algorithm, LatencyModel, RwmOptions};
use crate::diagnostics::{batch_means_ess, mean, standard_error};
use crate::error::{Error, Result};
use crate::gibbs::{self, GibbsConfig, ProposalSpec};
use crate::model::{build_model, ModelConfig, ModelSpec};
use crate::oracle::{self, consistency_limits, GaussianSetup};
use crate::regression::regression_report;
use crate::samples::Samples;
use crate::smc::{self, InitMethod, ScheduleConfig, SmcConfig};
use crate::test_fn::TestFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Path(PathBuf),
    Inline(ModelConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Gibbs,
    Smc,
    SmcWithStopping,
    Cmc,
    Direct,
}

impl AlgorithmKind {
    fn is_smc(self) -> bool {
        matches!(self, AlgorithmKind::Smc | AlgorithmKind::SmcWithStopping)
    }
}

/// Flat schedule description: adaptive with `cess_star`, or an explicit
/// `lambdas` list following `lambda0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub lambda0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cess_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ess_threshold: Option<f64>,
}

impl ScheduleSpec {
    pub fn to_config(&self) -> Result<ScheduleConfig> {
        let mut s = match (self.cess_star, &self.lambdas) {
            (Some(c), None) => ScheduleConfig::adaptive(self.lambda0, c),
            (None, Some(l)) => ScheduleConfig::fixed(self.lambda0, l.clone()),
            _ => {
                return Err(Error::config(
                    "schedule",
                    "give exactly one of cess_star (adaptive) or lambdas (fixed)",
                ))
            }
        };
        if let Some(v) = self.lambda_min {
            s.lambda_min = v;
        }
        if let Some(v) = self.max_steps {
            s.max_steps = v;
        }
        if let Some(v) = self.ess_threshold {
            s.ess_threshold = v;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub total: f64,
    pub latency: LatencyModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// Reference posterior mean: a stored file, the analytic oracle, or a long
/// direct chain run on the spot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub oracle: bool,
    #[serde(default = "default_truth_length")]
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_truth_length() -> usize {
    200_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub rows: Vec<CompareRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthSpec>,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_phi() -> Vec<TestFunction> {
    vec![TestFunction::Identity]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelRef,
    pub algorithm: AlgorithmKind,
    /// Fixed `λ` for the Gibbs sampler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Chain length, particle count, or per-subposterior chain length.
    #[serde(default)]
    pub samples: usize,
    /// RWM iterations per local block update (`k`).
    #[serde(default = "one")]
    pub inner_steps: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default)]
    pub proposal: ProposalSpec,
    /// Multiplier on the Laplace proposal of the CMC and direct chains.
    #[serde(default = "one_f")]
    pub proposal_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_fallback_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default = "one")]
    pub moves: usize,
    #[serde(default)]
    pub init: InitMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<usize>,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_phi")]
    pub phi: Vec<TestFunction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSpec>,
    #[serde(default = "yes")]
    pub parallel: bool,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn dir_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl ExperimentConfig {
    /// Parse, inline the model description and make relative paths
    /// absolute with respect to the file that mentions them.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
            field: "config".into(),
            reason: format!("{}: {e}", path.display()),
        })?;
        cfg.resolve_paths(&dir_of(path))?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let model = match &self.model {
            ModelRef::Path(p) => {
                let p = resolve(base, p);
                if !p.exists() {
                    return Err(Error::config("model", format!("{} does not exist", p.display())));
                }
                let mut m = ModelConfig::from_path(&p)?;
                if let Some(d) = &m.data_path {
                    m.data_path = Some(resolve(&dir_of(&p), d));
                }
                m
            }
            ModelRef::Inline(m) => {
                let mut m = m.clone();
                if let Some(d) = &m.data_path {
                    m.data_path = Some(resolve(base, d));
                }
                m
            }
        };
        if let Some(d) = &model.data_path {
            if !d.exists() {
                return Err(Error::config("model.data_path", format!("{} does not exist", d.display())));
            }
        }
        self.model = ModelRef::Inline(model);
        if let Some(gt) = self.compare.as_mut().and_then(|c| c.ground_truth.as_mut()) {
            if let Some(p) = &gt.path {
                gt.path = Some(resolve(base, p));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<&ModelConfig> {
        match &self.model {
            ModelRef::Inline(m) => Ok(m),
            ModelRef::Path(_) => Err(Error::config("model", "model path has not been resolved")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be at least 1"));
        }
        if self.phi.is_empty() {
            return Err(Error::config("phi", "at least one test function is required"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("inner_steps", "must be at least 1"));
        }
        if !(self.proposal_scale > 0.0) {
            return Err(Error::config("proposal_scale", "must be positive"));
        }
        if let Some(b) = &self.budget {
            b.latency.validate()?;
            if !(b.total > 0.0) {
                return Err(Error::config("budget.total", "must be positive"));
            }
        }
        let needs_samples = self.budget.is_none() || self.algorithm.is_smc() || self.algorithm == AlgorithmKind::Cmc;
        if needs_samples && self.samples == 0 {
            return Err(Error::config("samples", "must be at least 1"));
        }
        match self.algorithm {
            AlgorithmKind::Gibbs => {
                let l = self.lambda.ok_or_else(|| Error::config("lambda", "required for gibbs"))?;
                if !(l > 0.0 && l.is_finite()) {
                    return Err(Error::config("lambda", "must be positive and finite"));
                }
                if let Some(b) = &self.budget {
                    if b.latency.k != self.inner_steps {
                        return Err(Error::config(
                            "inner_steps",
                            format!("must equal budget.latency.k = {}", b.latency.k),
                        ));
                    }
                }
            }
            AlgorithmKind::Smc | AlgorithmKind::SmcWithStopping => {
                self.schedule
                    .as_ref()
                    .ok_or_else(|| Error::config("schedule", "required for smc"))?
                    .to_config()?;
                if self.budget.is_some() {
                    return Err(Error::config("budget", "budgets apply to gibbs and direct runs only"));
                }
                if self.algorithm == AlgorithmKind::SmcWithStopping {
                    match self.kappa {
                        Some(k) if k >= 1 => {}
                        _ => return Err(Error::config("kappa", "required (≥ 1) for smc_with_stopping")),
                    }
                }
            }
            AlgorithmKind::Cmc => {
                if self.budget.is_some() {
                    return Err(Error::config("budget", "budgets apply to gibbs and direct runs only"));
                }
            }
            AlgorithmKind::Direct => {}
        }
        Ok(())
    }

    pub fn seed(&self, replicate: usize) -> u64 {
        self.base_seed.wrapping_add(replicate as u64)
    }

    /// Iterations per replicate: the configured count, or what the budget
    /// affords.
    fn iterations(&self, algorithm: Algorithm) -> Result<usize> {
        match &self.budget {
            Some(b) => Ok(b.latency.samples_within_budget(algorithm, b.total)? as usize),
            None => Ok(self.samples),
        }
    }
}

/// `φ` name usable in file names.
fn phi_tag(phi: TestFunction) -> String {
    phi.to_string().replace(':', "_").replace('-', "m")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `estimates[φ][kind]` for one replicate.
pub type Estimates = BTreeMap<String, BTreeMap<String, Vec<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stopping {
    pub stopped_at: Option<usize>,
    pub chosen_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub estimates: Estimates,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stopping: BTreeMap<String, Stopping>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, Value>,
    pub config: ExperimentConfig,
}

fn chain_estimates(z: &Samples, phis: &[TestFunction], burn_in: usize) -> Result<Estimates> {
    phis.iter()
        .map(|&phi| {
            let e = gibbs::estimate_from(z, phi, burn_in)?;
            Ok((phi.to_string(), BTreeMap::from([("estimate".to_string(), e)])))
        })
        .collect()
}

fn run_replicate(cfg: &ExperimentConfig, model: &ModelSpec, r: usize, dir: &Path) -> Result<ReplicateRecord> {
    create_dir(dir)?;
    let seed = cfg.seed(r);
    let mut stopping = BTreeMap::new();
    let mut diagnostics = BTreeMap::new();
    let estimates = match cfg.algorithm {
        AlgorithmKind::Gibbs => {
            let mut g = GibbsConfig::new(cfg.lambda.unwrap_or_default(), cfg.iterations(Algorithm::Gcmc)?, seed);
            g.inner_steps = cfg.inner_steps;
            g.proposal = cfg.proposal.clone();
            g.burn_in = cfg.burn_in;
            g.global_fallback_steps = cfg.global_fallback_steps;
            g.parallel = cfg.parallel;
            let chain = gibbs::run_chain(model, &g)?;
            gibbs::write_chain_csv(&dir.join("chain.csv"), &chain)?;
            diagnostics.insert("acceptance".into(), json!(chain.acceptance));
            diagnostics.insert("chain_length".into(), json!(chain.z.len()));
            chain_estimates(&chain.z, &cfg.phi, cfg.burn_in)?
        }
        AlgorithmKind::Direct => {
            let mut o = RwmOptions::new(cfg.iterations(Algorithm::Direct)?, seed);
            o.scale = cfg.proposal_scale;
            let chain = cluster::run_direct_chain(model, &o)?;
            gibbs::write_samples_csv(&dir.join("chain.csv"), &chain.samples)?;
            diagnostics.insert("acceptance".into(), json!(chain.acceptance));
            diagnostics.insert("chain_length".into(), json!(chain.samples.len()));
            chain_estimates(&chain.samples, &cfg.phi, cfg.burn_in)?
        }
        AlgorithmKind::Cmc => {
            let mut o = RwmOptions::new(cfg.samples, seed);
            o.scale = cfg.proposal_scale;
            o.parallel = cfg.parallel;
            let chains = cluster::run_subposterior_chains(model, &o)?;
            diagnostics.insert(
                "subposterior_acceptance".into(),
                json!(chains.iter().map(|c| c.acceptance).collect::<Vec<_>>()),
            );
            let subs: Vec<Samples> = chains.into_iter().map(|c| c.samples.tail(cfg.burn_in)).collect();
            let combined = cluster::cmc_combine(&subs)?;
            gibbs::write_samples_csv(&dir.join("chain.csv"), &combined)?;
            chain_estimates(&combined, &cfg.phi, 0)?
        }
        AlgorithmKind::Smc | AlgorithmKind::SmcWithStopping => {
            let schedule = cfg.schedule.as_ref().expect("validated").to_config()?;
            let mut out = Estimates::new();
            for &phi in &cfg.phi {
                let mut s = SmcConfig::new(schedule.clone(), cfg.samples, phi, seed);
                s.moves = cfg.moves;
                s.inner_steps = cfg.inner_steps;
                s.proposal = cfg.proposal.clone();
                s.global_fallback_steps = cfg.global_fallback_steps;
                s.init = cfg.init;
                s.parallel = cfg.parallel;
                let run = match cfg.kappa.filter(|_| cfg.algorithm == AlgorithmKind::SmcWithStopping) {
                    Some(k) => smc::run_smc_with_stopping(model, &s, k)?,
                    None => smc::run_smc(model, &s)?,
                };
                let tag = phi_tag(phi);
                smc::write_trace_csv(&dir.join(format!("trace_{tag}.csv")), &run.trace)?;
                smc::write_particles_csv(&dir.join(format!("particles_{tag}.csv")), &run.system)?;
                let inputs = run.trace.regression_inputs()?;
                let report = regression_report(&inputs, run.stopping.as_ref())?;
                write_json(&dir.join(format!("regression_{tag}.json")), &report)?;
                let mut e = BTreeMap::new();
                let records = &run.trace.records;
                e.insert("initial".to_string(), records[0].eta.clone());
                e.insert("estimate".to_string(), records.last().expect("non-empty trace").eta.clone());
                let corrected = match &run.stopping {
                    Some(st) => st.corrected(),
                    None => report.intercept.iter().copied().collect(),
                };
                if let Some(m) = corrected {
                    e.insert("bias_corrected".to_string(), m);
                }
                if let Some(i) = report.chosen_index {
                    e.insert("chosen".to_string(), records[i].eta.clone());
                }
                if cfg.algorithm == AlgorithmKind::SmcWithStopping {
                    stopping.insert(
                        phi.to_string(),
                        Stopping {
                            stopped_at: report.stopped_at,
                            chosen_index: report.chosen_index,
                        },
                    );
                }
                diagnostics.insert(
                    format!("{phi}"),
                    json!({
                        "steps": records.len() - 1,
                        "final_lambda": run.system.lambda,
                        "resampling_count": run.system.resampling_count,
                        "init_thinning": run.init_thinning,
                    }),
                );
                out.insert(phi.to_string(), e);
            }
            out
        }
    };
    let record = ReplicateRecord {
        replicate: r,
        seed,
        estimates,
        stopping,
        diagnostics,
        config: cfg.clone(),
    };
    write_json(&dir.join("replicate.json"), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub mean: Vec<f64>,
    /// Sample standard deviation over replicates divided by `√R`.
    pub standard_error: Option<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<f64>>,
    /// `(mean − truth)²`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub squared_error: Option<Vec<f64>>,
    /// Mean over replicates of `(estimate − truth)²`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: AlgorithmKind,
    pub replicates: usize,
    pub base_seed: u64,
    /// `summary[φ][kind]`.
    pub estimates: BTreeMap<String, BTreeMap<String, EstimateSummary>>,
    /// `E_{π_λ} φ` at the run's fixed `λ`, when analytic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi_lambda_truth: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub stopping: BTreeMap<String, Vec<Stopping>>,
}

/// Analytic `E φ` under the posterior (`lambda = None`) or under `π_λ`.
pub fn analytic_truth(model: &ModelSpec, phi: TestFunction, lambda: Option<f64>) -> Option<Vec<f64>> {
    let (setup, space) = GaussianSetup::from_model(model)?;
    let (m, v) = match lambda {
        Some(l) => setup.pi_lambda_params(l),
        None => setup.posterior_params(),
    };
    oracle::expectation(space, m, v, phi).map(|e| vec![e])
}

fn summarize(cfg: &ExperimentConfig, model: &ModelSpec, records: &[ReplicateRecord]) -> RunSummary {
    let mut estimates = BTreeMap::new();
    let mut pi_lambda = BTreeMap::new();
    for &phi in &cfg.phi {
        let name = phi.to_string();
        let truth = analytic_truth(model, phi, None);
        let kinds: Vec<String> = records[0].estimates[&name].keys().cloned().collect();
        let mut per_kind = BTreeMap::new();
        for kind in kinds {
            // kinds absent in some replicate (e.g. no stop) are summarised over those present
            let values: Vec<Vec<f64>> = records
                .iter()
                .filter_map(|r| r.estimates[&name].get(&kind).cloned())
                .collect();
            let d = values[0].len();
            let col = |c: usize| values.iter().map(|v| v[c]).collect::<Vec<_>>();
            let m: Vec<f64> = (0..d).map(|c| mean(&col(c))).collect();
            let se = (values.len() > 1).then(|| (0..d).map(|c| standard_error(&col(c))).collect());
            let sq = truth.as_ref().map(|t| m.iter().zip(t).map(|(a, b)| (a - b).powi(2)).collect());
            let mse = truth.as_ref().map(|t| {
                (0..d).map(|c| mean(&col(c).iter().map(|v| (v - t[c]).powi(2)).collect::<Vec<_>>())).collect()
            });
            per_kind.insert(
                kind,
                EstimateSummary {
                    mean: m,
                    standard_error: se,
                    values,
                    truth: truth.clone(),
                    squared_error: sq,
                    mse,
                },
            );
        }
        estimates.insert(name.clone(), per_kind);
        if cfg.algorithm == AlgorithmKind::Gibbs {
            if let Some(t) = analytic_truth(model, phi, cfg.lambda) {
                pi_lambda.insert(name, t);
            }
        }
    }
    let mut stopping: BTreeMap<String, Vec<Stopping>> = BTreeMap::new();
    for r in records {
        for (k, s) in &r.stopping {
            stopping.entry(k.clone()).or_default().push(s.clone());
        }
    }
    RunSummary {
        algorithm: cfg.algorithm,
        replicates: records.len(),
        base_seed: cfg.base_seed,
        estimates,
        pi_lambda_truth: (!pi_lambda.is_empty()).then_some(pi_lambda),
        stopping,
    }
}

/// Run every replicate, write the artifacts under `out` and return the summary.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let model = build_model(cfg.model_config()?)?;
    create_dir(out)?;
    write_json(&out.join("config.resolved.json"), cfg)?;
    let one = |r: usize| run_replicate(cfg, &model, r, &out.join(format!("replicate_{r}")));
    let records: Vec<ReplicateRecord> = if cfg.parallel {
        (0..cfg.replicates).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..cfg.replicates).map(one).collect::<Result<_>>()?
    };
    let summary = summarize(cfg, &model, &records);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mean: Vec<f64>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResult {
    pub algorithm: Algorithm,
    pub lambda: Option<f64>,
    pub samples: u64,
    pub iteration_time: f64,
    pub likelihood_fraction: f64,
    /// Mean over replicates of `Σ_c (ẑ_c − z̄_c)²`.
    pub mean_sse: f64,
    pub sse_standard_error: Option<f64>,
    pub sse: Vec<f64>,
    /// Mean over replicates of the smallest per-coordinate batch-means ESS.
    pub mean_min_ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub budget: f64,
    pub latency: LatencyModel,
    pub replicates: usize,
    pub ground_truth: GroundTruth,
    pub rows: Vec<CompareResult>,
}

fn ground_truth(cfg: &ExperimentConfig, model: &ModelSpec, out: &Path) -> Result<GroundTruth> {
    let spec = cfg
        .compare
        .as_ref()
        .and_then(|c| c.ground_truth.as_ref())
        .ok_or_else(|| Error::config("compare.ground_truth", "a ground-truth reference is required"))?;
    if spec.oracle {
        let mean = analytic_truth(model, TestFunction::Identity, None)
            .ok_or_else(|| Error::config("compare.ground_truth.oracle", "model has no analytic posterior"))?;
        return Ok(GroundTruth {
            mean,
            source: "oracle".into(),
            length: None,
            seed: None,
        });
    }
    if let Some(p) = &spec.path {
        if !p.exists() {
            return Err(Error::config(
                "compare.ground_truth.path",
                format!("{} does not exist", p.display()),
            ));
        }
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let gt: GroundTruth = serde_json::from_str(&text)?;
        if gt.mean.len() != model.dim() {
            return Err(Error::Data {
                path: p.clone(),
                reason: format!("expected {} coordinates, got {}", model.dim(), gt.mean.len()),
            });
        }
        return Ok(gt);
    }
    let seed = spec.seed.unwrap_or(cfg.seed(cfg.replicates));
    let mut o = RwmOptions::new(spec.length, seed);
    o.scale = cfg.proposal_scale;
    let chain = cluster::run_direct_chain(model, &o)?;
    let gt = GroundTruth {
        mean: gibbs::estimate_from(&chain.samples, TestFunction::Identity, cfg.burn_in.min(spec.length / 2))?,
        source: "direct".into(),
        length: Some(spec.length),
        seed: Some(seed),
    };
    write_json(&out.join("ground_truth.json"), &gt)?;
    Ok(gt)
}

fn sse(est: &[f64], truth: &[f64]) -> f64 {
    est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum()
}

fn min_ess(z: &Samples, burn_in: usize) -> f64 {
    batch_means_ess(&z.tail(burn_in))
        .map(|v| v.into_iter().fold(f64::INFINITY, f64::min))
        .unwrap_or(f64::NAN)
}

/// Budgeted comparison: each row runs the iterations its algorithm affords
/// within `budget.total` and is scored against the ground truth.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<CompareTable> {
    let budget = cfg
        .budget
        .ok_or_else(|| Error::config("budget", "compare needs a budget and latency model"))?;
    budget.latency.validate()?;
    let spec = cfg
        .compare
        .as_ref()
        .ok_or_else(|| Error::config("compare", "compare needs a rows section"))?;
    if spec.rows.is_empty() {
        return Err(Error::config("compare.rows", "at least one row is required"));
    }
    if cfg.replicates == 0 {
        return Err(Error::config("replicates", "must be at least 1"));
    }
    for (i, row) in spec.rows.iter().enumerate() {
        if row.algorithm == Algorithm::Gcmc && !row.lambda.is_some_and(|l| l > 0.0) {
            return Err(Error::config(format!("compare.rows[{i}].lambda"), "gcmc rows need lambda > 0"));
        }
    }
    let model = build_model(cfg.model_config()?)?;
    create_dir(out)?;
    write_json(&out.join("config.resolved.json"), cfg)?;
    let truth = ground_truth(cfg, &model, out)?;
    let lat = budget.latency;
    let mut rows = Vec::new();
    for row in &spec.rows {
        let report = lat.budget_report(row.algorithm, budget.total)?;
        let n = report.samples as usize;
        if n <= cfg.burn_in + 1 {
            return Err(Error::config(
                "budget.total",
                format!("affords only {n} iterations of {:?}, not more than burn_in + 1", row.algorithm),
            ));
        }
        let one = |r: usize| -> Result<(f64, f64)> {
            let seed = cfg.seed(r);
            let z = match row.algorithm {
                Algorithm::Gcmc => {
                    let mut g = GibbsConfig::new(row.lambda.expect("validated"), n, seed);
                    g.inner_steps = lat.k;
                    g.proposal = cfg.proposal.clone();
                    g.global_fallback_steps = cfg.global_fallback_steps;
                    g.parallel = false;
                    gibbs::run_chain(&model, &g)?.z
                }
                Algorithm::Direct => {
                    let mut o = RwmOptions::new(n, seed);
                    o.scale = cfg.proposal_scale;
                    o.parallel = false;
                    cluster::run_direct_chain(&model, &o)?.samples
                }
            };
            let est = gibbs::estimate_from(&z, TestFunction::Identity, cfg.burn_in)?;
            Ok((sse(&est, &truth.mean), min_ess(&z, cfg.burn_in)))
        };
        let res: Vec<(f64, f64)> = if cfg.parallel {
            (0..cfg.replicates).into_par_iter().map(one).collect::<Result<_>>()?
        } else {
            (0..cfg.replicates).map(one).collect::<Result<_>>()?
        };
        let s: Vec<f64> = res.iter().map(|r| r.0).collect();
        let e: Vec<f64> = res.iter().map(|r| r.1).collect();
        rows.push(CompareResult {
            algorithm: row.algorithm,
            lambda: row.lambda,
            samples: report.samples,
            iteration_time: report.iteration_time,
            likelihood_fraction: report.likelihood_fraction,
            mean_sse: mean(&s),
            sse_standard_error: (s.len() > 1).then(|| standard_error(&s)),
            sse: s,
            mean_min_ess: mean(&e),
        });
    }
    let table = CompareTable {
        budget: budget.total,
        latency: lat,
        replicates: cfg.replicates,
        ground_truth: truth,
        rows,
    };
    write_json(&out.join("compare.json"), &table)?;
    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    w.write_record(["algorithm", "lambda", "samples", "mean_sse", "sse_standard_error", "mean_min_ess"])?;
    for r in &table.rows {
        w.write_record([
            format!("{:?}", r.algorithm).to_lowercase(),
            r.lambda.map(|l| format!("{l:e}")).unwrap_or_default(),
            r.samples.to_string(),
            format!("{:e}", r.mean_sse),
            r.sse_standard_error.map(|v| format!("{v:e}")).unwrap_or_default(),
            format!("{:e}", r.mean_min_ess),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out.join("compare.csv"), e))?;
    Ok(table)
}

/// One closed-form Gaussian query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleQuery {
    PiLambda { lambda: f64 },
    Ar1 { lambda: f64 },
    Bias { lambda: f64 },
    AsymptoticVariance { lambda: f64 },
    OptimalLambda { chain_length: f64 },
    Consistency { gamma: f64, c: f64 },
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(name, format!("{v} is not a finite number")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<f64> {
    if finite(name, v)? >= 0.0 {
        Ok(v)
    } else {
        Err(Error::config(name, "must be non-negative"))
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if finite(name, v)? > 0.0 {
        Ok(v)
    } else {
        Err(Error::config(name, "must be positive"))
    }
}

pub fn cmd_oracle(setup: &GaussianSetup, query: OracleQuery) -> Result<Value> {
    Ok(match query {
        OracleQuery::PiLambda { lambda } => {
            let (m, v) = setup.pi_lambda_params(non_negative("lambda", lambda)?);
            json!({"lambda": lambda, "mean": m, "variance": v})
        }
        OracleQuery::Ar1 { lambda } => {
            let a = setup.ar1_params(positive("lambda", lambda)?);
            json!({"lambda": lambda, "alpha": a.alpha, "intercept": a.intercept, "innovation_variance": a.innovation_var})
        }
        OracleQuery::Bias { lambda } => {
            json!({"lambda": lambda, "bias": setup.estimator_bias(non_negative("lambda", lambda)?)?})
        }
        OracleQuery::AsymptoticVariance { lambda } => {
            json!({"lambda": lambda, "asymptotic_variance": setup.asymptotic_variance(positive("lambda", lambda)?)?})
        }
        OracleQuery::OptimalLambda { chain_length } => {
            json!({"N": chain_length, "lambda": setup.optimal_lambda(finite("N", chain_length)?)?})
        }
        OracleQuery::Consistency { gamma, c } => {
            let l = consistency_limits(finite("gamma", gamma)?, positive("c", c)?, setup)?;
            json!({
                "gamma": gamma,
                "c": c,
                "variance_exponent": l.variance_exponent,
                "variance_limit": l.variance_limit,
                "mean_limit": l.mean_limit,
                "consistent": l.consistent,
            })
        }
    })
}
