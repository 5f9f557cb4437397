//! Closed-form ground truth for the conjugate Gaussian model.
//!
//! Prior `N(μ0, σ0²)`, block likelihoods `N(μ_j; z, σ_j²)` and kernels
//! `N(x; z, c_j λ)`. The "n-form" describes `n` observations with variance
//! `σ²` and mean `ȳ`, split evenly into `b` blocks, which is the per-block
//! form with `μ_j = ȳ`, `σ_j² = bσ²/n` and `c_j = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KernelFamily, KernelKind, ModelSpec, PartialLikelihood, Prior};
use crate::test_fn::TestFunction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub mean: f64,
    pub var: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NForm {
    pub n: f64,
    pub b: f64,
    pub sigma2: f64,
    pub ybar: f64,
    pub z_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSetup {
    pub mu0: f64,
    pub sigma0_sq: f64,
    pub blocks: Vec<Block>,
    pub n_form: Option<NForm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar1 {
    pub alpha: f64,
    pub intercept: f64,
    pub innovation_var: f64,
}

impl GaussianSetup {
    pub fn per_block(mu0: f64, sigma0_sq: f64, blocks: Vec<Block>) -> Result<Self> {
        if !(sigma0_sq > 0.0) {
            return Err(Error::config("sigma0_sq", "must be positive"));
        }
        if blocks.is_empty() {
            return Err(Error::config("blocks", "at least one block is required"));
        }
        if blocks.iter().any(|b| !(b.var > 0.0 && b.scale > 0.0)) {
            return Err(Error::config("blocks", "variances and scales must be positive"));
        }
        Ok(GaussianSetup {
            mu0,
            sigma0_sq,
            blocks,
            n_form: None,
        })
    }

    pub fn n_form(
        n: usize,
        b: usize,
        sigma2: f64,
        ybar: f64,
        mu0: f64,
        sigma0_sq: f64,
        z_star: Option<f64>,
    ) -> Result<Self> {
        if b == 0 || n == 0 || n % b != 0 {
            return Err(Error::config("b", format!("{b} must divide n = {n}")));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::config("sigma2", "must be positive"));
        }
        let block = Block {
            mean: ybar,
            var: b as f64 * sigma2 / n as f64,
            scale: 1.0,
        };
        let mut setup = GaussianSetup::per_block(mu0, sigma0_sq, vec![block; b])?;
        setup.n_form = Some(NForm {
            n: n as f64,
            b: b as f64,
            sigma2,
            ybar,
            z_star,
        });
        Ok(setup)
    }

    /// The matching model for the samplers.
    pub fn model(&self) -> Result<ModelSpec> {
        ModelSpec::new(
            1,
            Prior::Gaussian {
                mean: vec![self.mu0],
                var: vec![self.sigma0_sq],
            },
            self.blocks
                .iter()
                .map(|b| PartialLikelihood::Gaussian {
                    mean: b.mean,
                    var: b.var,
                })
                .collect(),
            KernelFamily::new(
                KernelKind::Gaussian,
                self.blocks.iter().map(|b| b.scale).collect(),
            )?,
        )
    }

    fn require_n_form(&self) -> Result<NForm> {
        self.n_form.ok_or_else(|| {
            Error::Unsupported("this quantity is defined for the n-observation form only".into())
        })
    }

    /// Mean and variance of `π_λ`; `λ = 0` gives the exact posterior.
    pub fn pi_lambda_params(&self, lambda: f64) -> (f64, f64) {
        let mut prec = 1.0 / self.sigma0_sq;
        let mut lin = self.mu0 / self.sigma0_sq;
        for b in &self.blocks {
            let v = b.var + b.scale * lambda;
            prec += 1.0 / v;
            lin += b.mean / v;
        }
        let var = 1.0 / prec;
        (var * lin, var)
    }

    pub fn posterior_params(&self) -> (f64, f64) {
        self.pi_lambda_params(0.0)
    }

    /// The exact Gibbs sampler's `z`-chain is `Z' = αZ + C + ε`.
    pub fn ar1_params(&self, lambda: f64) -> Ar1 {
        let mut prec = 1.0 / self.sigma0_sq;
        for b in &self.blocks {
            prec += 1.0 / (b.scale * lambda);
        }
        let tilde = 1.0 / prec;
        let mut alpha_sum = 0.0;
        let mut lin = self.mu0 / self.sigma0_sq;
        for b in &self.blocks {
            let cl = b.scale * lambda;
            alpha_sum += b.var / (cl * (b.var + cl));
            lin += b.mean / (b.var + cl);
        }
        let alpha = tilde * alpha_sum;
        Ar1 {
            alpha,
            intercept: tilde * lin,
            innovation_var: tilde * (1.0 + alpha),
        }
    }

    /// `lim N·Var(π_λ^N(Id))` for the exact Gibbs chain, any setup.
    pub fn chain_asymptotic_variance(&self, lambda: f64) -> f64 {
        let (_, var) = self.pi_lambda_params(lambda);
        let a = self.ar1_params(lambda).alpha;
        var * (1.0 + a) / (1.0 - a)
    }

    /// `π_λ(Id) − π(Id)` in the n-form.
    pub fn estimator_bias(&self, lambda: f64) -> Result<f64> {
        let f = self.require_n_form()?;
        let r = f.n * lambda / f.b;
        let s = f.sigma2 + f.n * self.sigma0_sq;
        Ok(f.n * r * self.sigma0_sq * (self.mu0 - f.ybar) / (s * (s + r)))
    }

    /// Asymptotic variance of the Gibbs-chain mean in the n-form.
    pub fn asymptotic_variance(&self, lambda: f64) -> Result<f64> {
        let f = self.require_n_form()?;
        if !(lambda > 0.0) {
            return Err(Error::Domain("asymptotic variance needs lambda > 0".into()));
        }
        let r = f.n * lambda / f.b;
        let s0 = self.sigma0_sq;
        let s = f.sigma2 + f.n * s0;
        Ok(s0 * (f.sigma2 + r) * (r * r + s * r + 2.0 * f.n * f.sigma2 * s0) / (r * (s + r).powi(2)))
    }

    /// `lim B(λ)/λ` and `lim λV(λ)` as `λ → 0`.
    pub fn first_order_constants(&self) -> Result<(f64, f64)> {
        let f = self.require_n_form()?;
        let s = f.sigma2 + f.n * self.sigma0_sq;
        let b_star = f.n * f.n * self.sigma0_sq * (self.mu0 - f.ybar) / (f.b * s * s);
        let v_star = 2.0 * f.b * f.sigma2.powi(2) * self.sigma0_sq.powi(2) / (s * s);
        Ok((b_star, v_star))
    }

    /// Minimiser of `(λB*)² + V*/(λN)`.
    pub fn optimal_lambda(&self, chain_length: f64) -> Result<f64> {
        let f = self.require_n_form()?;
        if self.mu0 == f.ybar {
            return Err(Error::Undefined(
                "optimal lambda: prior mean equals the data mean, first-order bias vanishes".into(),
            ));
        }
        if !(chain_length >= 1.0) {
            return Err(Error::config("N", "must be at least 1"));
        }
        let s = f.sigma2 + f.n * self.sigma0_sq;
        let num = f.b.powi(3) * f.sigma2.powi(2) * s * s;
        let den = f.n.powi(4) * chain_length * (self.mu0 - f.ybar).powi(2);
        Ok((num / den).cbrt())
    }
}

/// Limits of `π_{λ_n}` as `n → ∞` with `λ_n/b_n = c n^{-γ}`: `n^a δ² →
/// variance_limit` and `μ_(n) → mean_limit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyLimit {
    pub variance_exponent: f64,
    pub variance_limit: f64,
    pub mean_limit: f64,
    pub consistent: bool,
}

pub fn consistency_limits(gamma: f64, c: f64, setup: &GaussianSetup) -> Result<ConsistencyLimit> {
    let f = setup.require_n_form()?;
    if !(c > 0.0) {
        return Err(Error::config("c", "must be positive"));
    }
    let z_star = f
        .z_star
        .ok_or_else(|| Error::config("z_star", "required for consistency limits"))?;
    let (s0, mu0) = (setup.sigma0_sq, setup.mu0);
    let out = if gamma < 0.0 {
        ConsistencyLimit {
            variance_exponent: 0.0,
            variance_limit: s0,
            mean_limit: mu0,
            consistent: false,
        }
    } else if gamma == 0.0 {
        let v = 1.0 / (1.0 / s0 + 1.0 / c);
        ConsistencyLimit {
            variance_exponent: 0.0,
            variance_limit: v,
            mean_limit: v * (mu0 / s0 + z_star / c),
            consistent: false,
        }
    } else if gamma < 1.0 {
        ConsistencyLimit {
            variance_exponent: gamma,
            variance_limit: c,
            mean_limit: z_star,
            consistent: true,
        }
    } else if gamma == 1.0 {
        ConsistencyLimit {
            variance_exponent: 1.0,
            variance_limit: f.sigma2 + c,
            mean_limit: z_star,
            consistent: true,
        }
    } else {
        ConsistencyLimit {
            variance_exponent: 1.0,
            variance_limit: f.sigma2,
            mean_limit: z_star,
            consistent: true,
        }
    };
    Ok(out)
}

/// Scale on which a model reduces to the Gaussian oracle: `z` itself, or
/// `log z` for the log-normal model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSpace {
    Linear,
    Log,
}

impl GaussianSetup {
    /// The oracle setup of a one-dimensional conjugate model with a proper
    /// prior, if there is one.
    pub fn from_model(model: &ModelSpec) -> Option<(Self, OracleSpace)> {
        if model.dim() != 1 {
            return None;
        }
        let scales = &model.kernel().scales;
        let (mu0, s0, space) = match (model.prior(), model.kernel().kind) {
            (Prior::Gaussian { mean, var }, KernelKind::Gaussian) => (mean[0], var[0], OracleSpace::Linear),
            (Prior::LogNormal { location, scale }, KernelKind::LogNormal) => (*location, *scale, OracleSpace::Log),
            _ => return None,
        };
        let blocks = (0..model.blocks())
            .map(|j| match (model.likelihood(j), space) {
                (PartialLikelihood::Gaussian { mean, var }, OracleSpace::Linear)
                | (PartialLikelihood::LogNormal { log_location: mean, var }, OracleSpace::Log) => Some(Block {
                    mean: *mean,
                    var: *var,
                    scale: scales[j],
                }),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        GaussianSetup::per_block(mu0, s0, blocks).ok().map(|s| (s, space))
    }
}

/// `E φ(z)` when the oracle variable is `N(mean, var)` on `space`; `None`
/// when it has no closed form here.
pub fn expectation(space: OracleSpace, mean: f64, var: f64, phi: TestFunction) -> Option<f64> {
    match (space, phi) {
        (OracleSpace::Linear, TestFunction::Identity) => Some(mean),
        (OracleSpace::Linear, TestFunction::Power(k)) if k >= 0 => {
            // E u^k = m E u^{k-1} + (k-1) v E u^{k-2}
            let (mut prev, mut cur) = (1.0, mean);
            if k == 0 {
                return Some(1.0);
            }
            for i in 2..=k {
                let next = mean * cur + (i - 1) as f64 * var * prev;
                prev = cur;
                cur = next;
            }
            Some(cur)
        }
        (OracleSpace::Linear, _) => None,
        (OracleSpace::Log, TestFunction::Log) => Some(mean),
        (OracleSpace::Log, TestFunction::Identity) => Some((mean + 0.5 * var).exp()),
        (OracleSpace::Log, TestFunction::Power(k)) => {
            let k = k as f64;
            Some((k * mean + 0.5 * k * k * var).exp())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_n() -> GaussianSetup {
        GaussianSetup::n_form(10, 2, 1.0, 1.0, 0.0, 1.0, Some(1.0)).unwrap()
    }

    #[test]
    fn single_block_pi_lambda() {
        let s = GaussianSetup::per_block(
            0.0,
            1.0,
            vec![Block {
                mean: 2.0,
                var: 1.0,
                scale: 1.0,
            }],
        )
        .unwrap();
        let (m, v) = s.pi_lambda_params(1.0);
        assert!((m - 2.0 / 3.0).abs() < 1e-15 && (v - 2.0 / 3.0).abs() < 1e-15);
        let (m, v) = s.pi_lambda_params(1e15);
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        assert!((s.ar1_params(1.0).alpha - 0.25).abs() < 1e-15);
    }

    #[test]
    fn worked_bias_and_variance() {
        let s = toy_n();
        assert!((s.estimator_bias(1.0).unwrap() + 50.0 / 176.0).abs() < 1e-15);
        let (m1, _) = s.pi_lambda_params(1.0);
        let (m0, _) = s.posterior_params();
        assert!((m1 - 0.625).abs() < 1e-15 && (m0 - 10.0 / 11.0).abs() < 1e-15);
        assert!((s.asymptotic_variance(1.0).unwrap() - 0.46875).abs() < 1e-15);
        assert!((s.chain_asymptotic_variance(1.0) - 0.46875).abs() < 1e-14);
        assert!((crate::regression::mse_decomposition(-50.0 / 176.0, 0.046875) - 0.127_582_645).abs() < 1e-8);
    }

    #[test]
    fn optimal_lambda_worked_value_and_law() {
        let s = GaussianSetup::n_form(10, 1, 1.0, 1.0, 0.0, 1.0, None).unwrap();
        let l = s.optimal_lambda(1000.0).unwrap();
        assert!((l - (121.0f64 / 1e7).cbrt()).abs() < 1e-15);
        assert!((l - 0.022_957_704).abs() < 1e-9);
        let l8 = s.optimal_lambda(8000.0).unwrap();
        assert!((l8 / l - 0.5).abs() < 1e-12);
        let (b, v) = s.first_order_constants().unwrap();
        let var_part = v / (l * 1000.0);
        let bias_part = (l * b).powi(2);
        assert!((var_part / bias_part - 2.0).abs() < 1e-10);
        let flat = GaussianSetup::n_form(10, 1, 1.0, 0.0, 0.0, 1.0, None).unwrap();
        assert!(matches!(flat.optimal_lambda(10.0), Err(Error::Undefined(_))));
    }

    #[test]
    fn stationary_mean_identity() {
        let s = toy_n();
        for &l in &[0.01, 0.3, 7.0] {
            let a = s.ar1_params(l);
            let (m, v) = s.pi_lambda_params(l);
            assert!((a.intercept / (1.0 - a.alpha) - m).abs() < 1e-12);
            assert!((a.innovation_var / (1.0 - a.alpha * a.alpha) - v).abs() < 1e-12);
        }
        assert!(s.ar1_params(1e12).alpha < 1e-10);
        for &l in &[1e-4, 0.05, 2.0, 300.0] {
            let closed = s.asymptotic_variance(l).unwrap();
            assert!((closed / s.chain_asymptotic_variance(l) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn consistency_rows() {
        let s = toy_n();
        let r = consistency_limits(2.0, 3.0, &s).unwrap();
        assert_eq!((r.variance_limit, r.mean_limit), (1.0, 1.0));
        let r = consistency_limits(-1.0, 3.0, &s).unwrap();
        assert_eq!((r.variance_limit, r.mean_limit), (1.0, 0.0));
        assert!(!r.consistent);
        // direct evaluation at large n, gamma = 1, c = 1
        let n = 1_000_000usize;
        let big = GaussianSetup::n_form(n, 1, 1.0, 1.0, 0.0, 1.0, Some(1.0)).unwrap();
        let lambda = 1.0 / n as f64;
        let (_, v) = big.pi_lambda_params(lambda);
        let lim = consistency_limits(1.0, 1.0, &big).unwrap();
        assert!((n as f64 * v / lim.variance_limit - 1.0).abs() < 1e-3);
    }

    #[test]
    fn models_reduce_to_the_oracle() {
        let s = toy_n();
        let (back, space) = GaussianSetup::from_model(&s.model().unwrap()).unwrap();
        assert_eq!(space, OracleSpace::Linear);
        assert_eq!(back.pi_lambda_params(0.7), s.pi_lambda_params(0.7));
        let ln = crate::model::build_model(
            &serde_json::from_value(serde_json::json!({
                "model": "lognormal", "blocks": 3,
                "params": {"prior_location": 0.0, "prior_scale": 25.0, "log_locations": [0.1, 0.2, 0.3]}
            }))
            .unwrap(),
        )
        .unwrap();
        let (setup, space) = GaussianSetup::from_model(&ln).unwrap();
        assert_eq!(space, OracleSpace::Log);
        assert_eq!(setup.blocks[2].mean, 0.3);
        assert_eq!(setup.sigma0_sq, 25.0);
    }

    #[test]
    fn closed_form_expectations() {
        let e = |sp, phi| expectation(sp, 1.5, 0.4, phi).unwrap();
        assert_eq!(e(OracleSpace::Linear, TestFunction::Identity), 1.5);
        assert!((e(OracleSpace::Linear, TestFunction::Power(2)) - 2.65).abs() < 1e-12);
        // third moment m³ + 3mv
        assert!((e(OracleSpace::Linear, TestFunction::Power(3)) - (3.375 + 1.8)).abs() < 1e-12);
        assert_eq!(expectation(OracleSpace::Linear, 1.5, 0.4, TestFunction::Log), None);
        assert_eq!(e(OracleSpace::Log, TestFunction::Log), 1.5);
        assert!((e(OracleSpace::Log, TestFunction::Identity) - 1.7f64.exp()).abs() < 1e-12);
        assert!((e(OracleSpace::Log, TestFunction::Power(-1)) - (-1.3f64).exp()).abs() < 1e-12);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn n_form_depends_on_lambda_over_b(lambda in 1e-4f64..10.0, k in 1usize..4, mu0 in -3.0f64..3.0, s0 in 0.1f64..5.0) {
            let a = GaussianSetup::n_form(24, 2, 1.3, 0.4, mu0, s0, None).unwrap();
            let b = GaussianSetup::n_form(24, 2 * k, 1.3, 0.4, mu0, s0, None).unwrap();
            let l2 = lambda * k as f64;
            let rel = |x: f64, y: f64| (x - y).abs() <= 1e-10 * (1.0 + x.abs());
            prop_assert!(rel(a.estimator_bias(lambda).unwrap(), b.estimator_bias(l2).unwrap()));
            prop_assert!(rel(a.asymptotic_variance(lambda).unwrap(), b.asymptotic_variance(l2).unwrap()));
            prop_assert!(rel(a.pi_lambda_params(lambda).0, b.pi_lambda_params(l2).0));
        }

        #[test]
        fn bias_is_pi_lambda_shift(lambda in 0.0f64..20.0, mu0 in -3.0f64..3.0, s0 in 0.1f64..5.0) {
            let s = GaussianSetup::n_form(12, 3, 0.8, 1.1, mu0, s0, None).unwrap();
            let shift = s.pi_lambda_params(lambda).0 - s.posterior_params().0;
            prop_assert!((s.estimator_bias(lambda).unwrap() - shift).abs() < 1e-12);
        }

        #[test]
        fn stationary_moments(lambda in 1e-3f64..50.0, mu0 in -3.0f64..3.0) {
            let s = toy_n();
            let s = GaussianSetup::per_block(mu0, 2.0, s.blocks).unwrap();
            let a = s.ar1_params(lambda);
            let (m, v) = s.pi_lambda_params(lambda);
            prop_assert!((0.0..1.0).contains(&a.alpha));
            prop_assert!((a.intercept / (1.0 - a.alpha) - m).abs() < 1e-10 * (1.0 + m.abs()));
            prop_assert!((a.innovation_var / (1.0 - a.alpha * a.alpha) / v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn first_order_slope_matches_finite_difference() {
        let s = toy_n();
        let (b_star, _) = s.first_order_constants().unwrap();
        let h = 1e-7;
        let slope = (s.pi_lambda_params(h).0 - s.pi_lambda_params(0.0).0) / h;
        assert!((slope / b_star - 1.0).abs() < 1e-6, "{slope} vs {b_star}");
    }
}
