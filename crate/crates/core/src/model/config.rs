//! JSON model descriptions and the logistic-regression data loader.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{KernelFamily, KernelKind, LogisticBlock, ModelSpec, PartialLikelihood, Prior};
use crate::error::{Error, Result};
use crate::rng::{self, standard_normal, uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gaussian,
    Lognormal,
    LogisticRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelKind,
    pub blocks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_scales: Option<Vec<f64>>,
    #[serde(default)]
    pub params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
}

impl ModelConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn field_f64(params: &Value, key: &str) -> Result<Option<f64>> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| Error::config(format!("params.{key}"), "expected a number")),
    }
}

fn field_vec(params: &Value, key: &str) -> Result<Option<Vec<f64>>> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| Error::config(format!("params.{key}"), "expected numbers"))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Some(_) => Err(Error::config(format!("params.{key}"), "expected an array")),
    }
}

fn require_f64(params: &Value, key: &str) -> Result<f64> {
    field_f64(params, key)?.ok_or_else(|| Error::config(format!("params.{key}"), "missing"))
}

/// Either an explicit list of length `b` or i.i.d. normal draws
/// described by `{"mean", "var", "seed"}` under `<key>_from`.
fn block_locations(params: &Value, key: &str, b: usize) -> Result<Vec<f64>> {
    if let Some(v) = field_vec(params, key)? {
        if v.len() != b {
            return Err(Error::config(
                format!("params.{key}"),
                format!("expected {b} values, got {}", v.len()),
            ));
        }
        return Ok(v);
    }
    let from_key = format!("{key}_from");
    let Some(spec) = params.get(&from_key) else {
        return Err(Error::config(
            format!("params.{key}"),
            format!("give either {key} or {from_key}"),
        ));
    };
    let mean = require_f64(spec, "mean")?;
    let var = require_f64(spec, "var")?;
    let seed = spec.get("seed").and_then(Value::as_u64).unwrap_or(0);
    if !(var >= 0.0) {
        return Err(Error::config(format!("params.{from_key}.var"), "must be non-negative"));
    }
    Ok(draw_locations(mean, var, b, seed))
}

/// `b` i.i.d. `N(mean, var)` draws from a dedicated data stream.
pub fn draw_locations(mean: f64, var: f64, b: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, rng::Domain::Data, 0, 0);
    (0..b).map(|_| mean + var.sqrt() * standard_normal(&mut r)).collect()
}

fn block_variances(params: &Value, b: usize) -> Result<Vec<f64>> {
    let v = match field_vec(params, "variances")? {
        Some(v) => v,
        None => vec![field_f64(params, "variance")?.unwrap_or(1.0); b],
    };
    if v.len() != b || v.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::config(
            "params.variances",
            format!("expected {b} positive values"),
        ));
    }
    Ok(v)
}

fn build_gaussian(config: &ModelConfig, kernel: KernelFamily) -> Result<ModelSpec> {
    let p = &config.params;
    let b = config.blocks;
    let prior = match (field_f64(p, "prior_mean")?, field_f64(p, "prior_var")?) {
        (Some(mean), Some(var)) => Prior::Gaussian {
            mean: vec![mean],
            var: vec![var],
        },
        (None, None) => Prior::Uniform,
        _ => return Err(Error::config("params.prior_var", "give both prior_mean and prior_var")),
    };
    let likelihoods = if let Some(n) = field_f64(p, "n")? {
        // n observations with variance sigma2 and overall mean ybar, split evenly
        let n_int = n as usize;
        if n_int == 0 || n_int as f64 != n || n_int % b != 0 {
            return Err(Error::config(
                "params.n",
                format!("n = {n} must be a positive multiple of blocks = {b}"),
            ));
        }
        let sigma2 = require_f64(p, "sigma2")?;
        let ybar = require_f64(p, "ybar")?;
        vec![
            PartialLikelihood::Gaussian {
                mean: ybar,
                var: b as f64 * sigma2 / n,
            };
            b
        ]
    } else {
        let means = block_locations(p, "means", b)?;
        let vars = block_variances(p, b)?;
        means
            .into_iter()
            .zip(vars)
            .map(|(mean, var)| PartialLikelihood::Gaussian { mean, var })
            .collect()
    };
    ModelSpec::new(1, prior, likelihoods, kernel)
}

fn build_lognormal(config: &ModelConfig, kernel: KernelFamily) -> Result<ModelSpec> {
    let p = &config.params;
    let b = config.blocks;
    let prior = match (field_f64(p, "prior_location")?, field_f64(p, "prior_scale")?) {
        (Some(location), Some(scale)) => Prior::LogNormal { location, scale },
        (None, None) => Prior::Uniform,
        _ => {
            return Err(Error::config(
                "params.prior_scale",
                "give both prior_location and prior_scale",
            ))
        }
    };
    let locs = block_locations(p, "log_locations", b)?;
    let vars = block_variances(p, b)?;
    let likelihoods = locs
        .into_iter()
        .zip(vars)
        .map(|(log_location, var)| PartialLikelihood::LogNormal { log_location, var })
        .collect();
    ModelSpec::new(1, prior, likelihoods, kernel)
}

/// Parsed logistic data: responses and row-major covariates with a leading
/// intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticData {
    pub dim: usize,
    pub responses: Vec<f64>,
    pub covariates: Vec<f64>,
}

impl LogisticData {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

/// Read `response,cov_1,...,cov_{d-1}` rows; a non-numeric first row is
/// treated as a header.
pub fn load_logistic_csv(path: &Path) -> Result<LogisticData> {
    let data_err = |reason: String| Error::Data {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => data_err(format!("{other:?}")),
        })?;
    let mut dim = None;
    let mut responses = Vec::new();
    let mut covariates = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|s| s.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(e) => return Err(data_err(format!("row {}: {e}", line + 1))),
        };
        if values.is_empty() {
            continue;
        }
        let d = *dim.get_or_insert(values.len());
        if values.len() != d {
            return Err(data_err(format!(
                "row {} has {} columns, expected {d}",
                line + 1,
                values.len()
            )));
        }
        let eta = values[0];
        if eta != 1.0 && eta != -1.0 {
            return Err(data_err(format!("row {}: response {eta} not in {{-1, 1}}", line + 1)));
        }
        responses.push(eta);
        covariates.push(1.0);
        covariates.extend_from_slice(&values[1..]);
    }
    let Some(dim) = dim else {
        return Err(data_err("no data rows".into()));
    };
    Ok(LogisticData {
        dim,
        responses,
        covariates,
    })
}

/// Synthetic logistic data with binary covariates, drawn under the model's
/// own convention `P(η = 1 | ξ) = S(zᵀξ)` with `S(t) = 1/(1+e^t)`.
pub fn synthetic_logistic_data(
    n: usize,
    dim: usize,
    coefficients: &[f64],
    covariate_prob: f64,
    seed: u64,
) -> LogisticData {
    let mut r = rng::stream(seed, rng::Domain::Data, 1, 0);
    let mut responses = Vec::with_capacity(n);
    let mut covariates = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let start = covariates.len();
        covariates.push(1.0);
        for _ in 1..dim {
            covariates.push(if uniform(&mut r) < covariate_prob { 1.0 } else { 0.0 });
        }
        let t: f64 = covariates[start..]
            .iter()
            .zip(coefficients)
            .map(|(a, b)| a * b)
            .sum();
        let p_plus = 1.0 / (1.0 + t.exp());
        responses.push(if uniform(&mut r) < p_plus { 1.0 } else { -1.0 });
    }
    LogisticData {
        dim,
        responses,
        covariates,
    }
}

fn logistic_data(config: &ModelConfig) -> Result<LogisticData> {
    if let Some(path) = &config.data_path {
        return load_logistic_csv(path);
    }
    let Some(spec) = config.params.get("synthetic") else {
        return Err(Error::config(
            "data_path",
            "logistic regression needs a data_path or params.synthetic",
        ));
    };
    let n = require_f64(spec, "n")? as usize;
    let dim = require_f64(spec, "dim")? as usize;
    if dim == 0 || n == 0 {
        return Err(Error::config("params.synthetic", "n and dim must be positive"));
    }
    let seed = spec.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let prob = field_f64(spec, "covariate_prob")?.unwrap_or(0.5);
    let coef = match field_vec(spec, "coefficients")? {
        Some(c) if c.len() == dim => c,
        Some(c) => {
            return Err(Error::config(
                "params.synthetic.coefficients",
                format!("expected {dim} values, got {}", c.len()),
            ))
        }
        None => {
            let mut r = rng::stream(seed, rng::Domain::Data, 2, 0);
            (0..dim).map(|_| standard_normal(&mut r)).collect()
        }
    };
    Ok(synthetic_logistic_data(n, dim, &coef, prob, seed))
}

fn build_logistic(config: &ModelConfig, kernel: KernelFamily) -> Result<ModelSpec> {
    let data = logistic_data(config)?;
    let b = config.blocks;
    let n = data.len();
    if n % b != 0 {
        return Err(Error::config(
            "blocks",
            format!("{b} blocks do not divide {n} observations evenly"),
        ));
    }
    let per = n / b;
    let d = data.dim;
    let sd_intercept = field_f64(&config.params, "prior_sd_intercept")?.unwrap_or(20.0);
    let sd_other = field_f64(&config.params, "prior_sd")?.unwrap_or(5.0);
    let mut var = vec![sd_other * sd_other; d];
    var[0] = sd_intercept * sd_intercept;
    let prior = Prior::Gaussian {
        mean: vec![0.0; d],
        var,
    };
    let likelihoods = (0..b)
        .map(|j| {
            let rows = j * per..(j + 1) * per;
            LogisticBlock::new(
                d,
                data.responses[rows.clone()].to_vec(),
                data.covariates[rows.start * d..rows.end * d].to_vec(),
            )
            .map(PartialLikelihood::Logistic)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelSpec::new(d, prior, likelihoods, kernel)
}

pub fn build_model(config: &ModelConfig) -> Result<ModelSpec> {
    if config.blocks == 0 {
        return Err(Error::config("blocks", "must be at least 1"));
    }
    let scales = match &config.kernel_scales {
        Some(s) if s.len() != config.blocks => {
            return Err(Error::config(
                "kernel_scales",
                format!("expected {} values, got {}", config.blocks, s.len()),
            ))
        }
        Some(s) => s.clone(),
        None => vec![1.0; config.blocks],
    };
    match config.model {
        ModelKind::Gaussian => build_gaussian(config, KernelFamily::new(KernelKind::Gaussian, scales)?),
        ModelKind::Lognormal => {
            build_lognormal(config, KernelFamily::new(KernelKind::LogNormal, scales)?)
        }
        ModelKind::LogisticRegression => {
            build_logistic(config, KernelFamily::new(KernelKind::Gaussian, scales)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Conjugacy;
    use serde_json::json;
    use std::io::Write;

    fn cfg(v: Value) -> ModelConfig {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn gaussian_with_drawn_means() {
        let m = build_model(&cfg(json!({
            "model": "gaussian", "blocks": 32,
            "params": {"prior_mean": 4.0, "prior_var": 1.0,
                       "means_from": {"mean": 4.0, "var": 1.0, "seed": 9}}
        })))
        .unwrap();
        assert_eq!(m.blocks(), 32);
        assert_eq!(m.conjugacy(), Conjugacy::GaussianConjugate);
        let means: Vec<f64> = (0..32)
            .map(|j| match m.likelihood(j) {
                PartialLikelihood::Gaussian { mean, var } => {
                    assert_eq!(*var, 1.0);
                    *mean
                }
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(means, draw_locations(4.0, 1.0, 32, 9));
    }

    #[test]
    fn gaussian_n_form() {
        let m = build_model(&cfg(json!({
            "model": "gaussian", "blocks": 2,
            "params": {"prior_mean": 0.0, "prior_var": 1.0, "n": 10, "sigma2": 1.0, "ybar": 1.0}
        })))
        .unwrap();
        assert_eq!(
            m.likelihood(1),
            &PartialLikelihood::Gaussian { mean: 1.0, var: 0.2 }
        );
        let bad = build_model(&cfg(json!({
            "model": "gaussian", "blocks": 3,
            "params": {"n": 10, "sigma2": 1.0, "ybar": 1.0}
        })));
        assert!(bad.is_err());
    }

    #[test]
    fn lognormal_prior_is_parsed() {
        let m = build_model(&cfg(json!({
            "model": "lognormal", "blocks": 32,
            "params": {"prior_location": 0.0, "prior_scale": 25.0,
                       "log_locations_from": {"mean": 0.0, "var": 1.0, "seed": 1}}
        })))
        .unwrap();
        assert_eq!(
            m.prior(),
            &Prior::LogNormal {
                location: 0.0,
                scale: 25.0
            }
        );
        assert_eq!(m.conjugacy(), Conjugacy::LognormalConjugate);
    }

    #[test]
    fn logistic_synthetic_split_is_even() {
        let m = build_model(&cfg(json!({
            "model": "logistic_regression", "blocks": 4,
            "params": {"synthetic": {"n": 100, "dim": 3, "seed": 2}}
        })))
        .unwrap();
        assert_eq!(m.dim(), 3);
        for j in 0..4 {
            match m.likelihood(j) {
                PartialLikelihood::Logistic(block) => assert_eq!(block.len(), 25),
                _ => unreachable!(),
            }
        }
        assert_eq!(
            m.prior(),
            &Prior::Gaussian {
                mean: vec![0.0; 3],
                var: vec![400.0, 25.0, 25.0]
            }
        );
        let uneven = build_model(&cfg(json!({
            "model": "logistic_regression", "blocks": 3,
            "params": {"synthetic": {"n": 100, "dim": 3, "seed": 2}}
        })));
        assert!(matches!(uneven, Err(Error::Config { .. })));
    }

    #[test]
    fn unknown_model_is_rejected() {
        let r: std::result::Result<ModelConfig, _> =
            serde_json::from_value(json!({"model": "poisson", "blocks": 1}));
        assert!(r.is_err());
    }

    #[test]
    fn csv_loader_appends_intercept_and_checks_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "y,a,b\n1,0,1\n-1,1,1").unwrap();
        let d = load_logistic_csv(&path).unwrap();
        assert_eq!(d.dim, 3);
        assert_eq!(d.responses, vec![1.0, -1.0]);
        assert_eq!(d.covariates, vec![1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "1,0\n2,1\n").unwrap();
        assert!(matches!(load_logistic_csv(&bad), Err(Error::Data { .. })));
        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "1,0\n-1,1,1\n").unwrap();
        assert!(load_logistic_csv(&ragged).is_err());
    }

    #[test]
    fn synthetic_data_follows_the_printed_convention() {
        // with a large positive intercept, S(t) is near zero so eta = -1 dominates
        let d = synthetic_logistic_data(2000, 1, &[3.0], 0.5, 4);
        let plus = d.responses.iter().filter(|&&r| r == 1.0).count() as f64 / 2000.0;
        let expect = 1.0 / (1.0 + 3f64.exp());
        assert!((plus - expect).abs() < 4.0 * (expect * (1.0 - expect) / 2000.0).sqrt());
    }
}
