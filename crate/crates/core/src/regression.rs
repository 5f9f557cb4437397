//! Regression-based bias correction over a sequence of `(λ_p, η_p, v_p)`,
//! the R² inclusion heuristic and the MSE-proxy stopping rule.
//!
//! Indices refer to positions in the trace (0 = the initial `λ_0`). Points
//! with a zero or non-finite variance proxy never enter a regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub lambda: f64,
    pub eta: f64,
    pub v: f64,
}

impl Point {
    pub fn usable(&self) -> bool {
        self.v > 0.0 && self.v.is_finite() && self.eta.is_finite()
    }
}

/// One component's trace. Only usable points may be named in an inclusion set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegressionInput {
    pub points: Vec<Point>,
}

impl RegressionInput {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        for w in points.windows(2) {
            if !(w[1].lambda < w[0].lambda) {
                return Err(Error::NonDecreasingSchedule {
                    prev: w[0].lambda,
                    next: w[1].lambda,
                });
            }
        }
        if let Some(p) = points.iter().find(|p| !(p.lambda > 0.0)) {
            return Err(Error::config("lambda", format!("{} is not positive", p.lambda)));
        }
        Ok(RegressionInput { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of usable points; unusable ones are reported once.
    pub fn usable_indices(&self) -> Vec<usize> {
        let (ok, bad): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| self.points[i].usable());
        if !bad.is_empty() {
            log::warn!("excluding {} zero-variance estimates from regression: {bad:?}", bad.len());
        }
        ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WlsFit {
    pub intercept: f64,
    pub slope: f64,
    pub lambda_mean: f64,
    pub eta_mean: f64,
}

impl WlsFit {
    pub fn predict(&self, lambda: f64) -> f64 {
        self.intercept + self.slope * lambda
    }
}

fn check_set(input: &RegressionInput, set: &[usize]) -> Result<()> {
    if set.len() < 2 {
        return Err(Error::config("S", "at least two points are required"));
    }
    for &i in set {
        let p = input
            .points
            .get(i)
            .ok_or_else(|| Error::config("S", format!("index {i} is out of range")))?;
        if !p.usable() {
            return Err(Error::config("S", format!("point {i} has no usable variance")));
        }
    }
    Ok(())
}

/// Weighted least squares of `η` on `λ` with weights `1/v` over `set`.
pub fn weighted_fit(input: &RegressionInput, set: &[usize]) -> Result<WlsFit> {
    check_set(input, set)?;
    let pts = || set.iter().map(|&i| &input.points[i]);
    let wsum: f64 = pts().map(|p| 1.0 / p.v).sum();
    let lm = pts().map(|p| p.lambda / p.v).sum::<f64>() / wsum;
    let em = pts().map(|p| p.eta / p.v).sum::<f64>() / wsum;
    let sxy: f64 = pts().map(|p| (p.lambda - lm) * (p.eta - em) / p.v).sum();
    let sxx: f64 = pts().map(|p| (p.lambda - lm).powi(2) / p.v).sum();
    let first = input.points[set[0]].lambda;
    if pts().all(|p| p.lambda == first) || !(sxx > 0.0) {
        return Err(Error::SingularDesign);
    }
    let slope = sxy / sxx;
    Ok(WlsFit {
        intercept: em - lm * slope,
        slope,
        lambda_mean: lm,
        eta_mean: em,
    })
}

/// The intercept of the weighted fit: the extrapolation to `λ = 0`.
pub fn bias_corrected_estimate(input: &RegressionInput, set: &[usize]) -> Result<f64> {
    weighted_fit(input, set).map(|f| f.intercept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RSquared {
    /// Explained over total weighted sum of squares.
    pub explained: f64,
    /// One minus residual over total weighted sum of squares.
    pub residual: f64,
    /// All `η` equal: both forms are set to 1 by convention.
    pub zero_total: bool,
}

impl RSquared {
    pub fn value(&self) -> f64 {
        self.explained
    }
}

pub fn weighted_r_squared(input: &RegressionInput, set: &[usize], fit: &WlsFit) -> RSquared {
    let pts = || set.iter().map(|&i| &input.points[i]);
    let first = input.points[set[0]].eta;
    let total: f64 = pts().map(|p| (p.eta - fit.eta_mean).powi(2) / p.v).sum();
    if pts().all(|p| p.eta == first) || total == 0.0 {
        return RSquared {
            explained: 1.0,
            residual: 1.0,
            zero_total: true,
        };
    }
    let explained: f64 = pts()
        .map(|p| (fit.predict(p.lambda) - fit.eta_mean).powi(2) / p.v)
        .sum();
    let resid: f64 = pts().map(|p| (p.eta - fit.predict(p.lambda)).powi(2) / p.v).sum();
    RSquared {
        explained: explained / total,
        residual: 1.0 - resid / total,
        zero_total: false,
    }
}

fn r2_of(input: &RegressionInput, set: &[usize]) -> Result<f64> {
    let fit = weighted_fit(input, set)?;
    Ok(weighted_r_squared(input, set, &fit).value())
}

/// R² differences below this are rounding noise and count as ties.
const R2_TIE: f64 = 1e-12;

/// Drop the largest-λ point while doing so strictly increases R², keeping at
/// least three points. `set` must be sorted by index.
fn prune(input: &RegressionInput, set: &mut Vec<usize>) -> Result<()> {
    if set.len() < 2 {
        return Ok(());
    }
    let mut current = r2_of(input, set)?;
    while set.len() > 3 {
        let candidate = r2_of(input, &set[1..])?;
        if candidate > current + R2_TIE {
            set.remove(0);
            current = candidate;
        } else {
            break;
        }
    }
    Ok(())
}

/// Batch inclusion procedure over the whole trace.
pub fn select_inclusion_set(input: &RegressionInput) -> Result<Vec<usize>> {
    let mut set = input.usable_indices();
    prune(input, &mut set)?;
    Ok(set)
}

pub fn mse_decomposition(bias: f64, variance: f64) -> f64 {
    bias * bias + variance
}

/// Inclusion set maintained online, one new point at a time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OnlineInclusion {
    pub set: Vec<usize>,
}

impl OnlineInclusion {
    /// Add point `p` (if usable) and prune; returns the current fit when
    /// the set holds at least two points.
    pub fn push(&mut self, input: &RegressionInput, p: usize) -> Result<Option<WlsFit>> {
        if input.points[p].usable() {
            self.set.push(p);
        } else {
            log::warn!("estimate {p} has a zero variance proxy and is not used in regression");
        }
        if self.set.len() < 2 {
            return Ok(None);
        }
        prune(input, &mut self.set)?;
        weighted_fit(input, &self.set).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Decision {
    Continue,
    Stop { step: usize, chosen: usize },
}

/// Bookkeeping for the stopping rule; one regression per component.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingState {
    pub kappa: usize,
    pub inclusion: Vec<OnlineInclusion>,
    /// `i_p` for every step seen, `None` while `m_p` is undefined.
    pub history: Vec<Option<usize>>,
    pub fits: Vec<Option<WlsFit>>,
    pub decision: Decision,
}

impl StoppingState {
    pub fn new(kappa: usize, components: usize) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::config("kappa", "must be at least 1"));
        }
        Ok(StoppingState {
            kappa,
            inclusion: vec![OnlineInclusion::default(); components],
            history: Vec::new(),
            fits: vec![None; components],
            decision: Decision::Continue,
        })
    }

    pub fn step(&self) -> usize {
        self.history.len()
    }

    /// Current bias-corrected estimates `m_p`, per component.
    pub fn corrected(&self) -> Option<Vec<f64>> {
        self.fits.iter().map(|f| f.map(|f| f.intercept)).collect()
    }
}

/// Feed step `p = state.step()` of every component's trace (which must
/// already contain that point). Points after a stop are ignored.
pub fn stopping_rule_step(state: &mut StoppingState, inputs: &[RegressionInput]) -> Result<Decision> {
    if let Decision::Stop { .. } = state.decision {
        return Ok(state.decision);
    }
    if inputs.len() != state.inclusion.len() {
        return Err(Error::config("phi", "component count changed during the run"));
    }
    let p = state.step();
    for (c, input) in inputs.iter().enumerate() {
        if input.len() <= p {
            return Err(Error::config("trace", format!("step {p} is missing")));
        }
        state.fits[c] = state.inclusion[c].push(input, p)?;
    }
    let chosen = state.corrected().and_then(|m| {
        (0..=p)
            .filter(|&q| inputs.iter().all(|inp| inp.points[q].usable()))
            .map(|q| {
                let proxy: f64 = inputs
                    .iter()
                    .zip(&m)
                    .map(|(inp, mc)| mse_decomposition(inp.points[q].eta - mc, inp.points[q].v))
                    .sum();
                (q, proxy)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(q, _)| q)
    });
    state.history.push(chosen);
    let k = state.kappa;
    if p + 1 >= k {
        let tail = &state.history[p + 1 - k..];
        if let Some(first) = tail[0] {
            if tail.iter().all(|h| *h == Some(first)) {
                state.decision = Decision::Stop { step: p, chosen: first };
            }
        }
    }
    Ok(state.decision)
}

/// Replay the stopping rule over a completed trace.
pub fn apply_stopping_rule(inputs: &[RegressionInput], kappa: usize) -> Result<StoppingState> {
    let mut state = StoppingState::new(kappa, inputs.len())?;
    let n = inputs.iter().map(|i| i.len()).min().unwrap_or(0);
    for _ in 0..n {
        if let Decision::Stop { .. } = stopping_rule_step(&mut state, inputs)? {
            break;
        }
    }
    Ok(state)
}

/// Report of a bias correction. `S` names the first component's inclusion
/// set; all sets are in `S_components`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    #[serde(rename = "S")]
    pub set: Vec<usize>,
    #[serde(rename = "S_components")]
    pub set_components: Vec<Vec<usize>>,
    pub intercept: Vec<Option<f64>>,
    pub slope: Vec<Option<f64>>,
    pub r_squared: Vec<Option<f64>>,
    pub stopped_at: Option<usize>,
    pub chosen_index: Option<usize>,
}

/// Batch inclusion plus fit per component, and the stopping decision if any.
pub fn regression_report(inputs: &[RegressionInput], stopping: Option<&StoppingState>) -> Result<RegressionReport> {
    let mut sets = Vec::new();
    let (mut intercept, mut slope, mut r2) = (Vec::new(), Vec::new(), Vec::new());
    for input in inputs {
        let set = match stopping {
            Some(s) => s.inclusion[sets.len()].set.clone(),
            None => select_inclusion_set(input)?,
        };
        let fit = if set.len() >= 2 { Some(weighted_fit(input, &set)?) } else { None };
        intercept.push(fit.map(|f| f.intercept));
        slope.push(fit.map(|f| f.slope));
        r2.push(fit.map(|f| weighted_r_squared(input, &set, &f).value()));
        sets.push(set);
    }
    let (stopped_at, chosen_index) = match stopping.map(|s| s.decision) {
        Some(Decision::Stop { step, chosen }) => (Some(step), Some(chosen)),
        _ => (None, None),
    };
    Ok(RegressionReport {
        set: sets.first().cloned().unwrap_or_default(),
        set_components: sets,
        intercept,
        slope,
        r_squared: r2,
        stopped_at,
        chosen_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn input(rows: &[(f64, f64, f64)]) -> RegressionInput {
        RegressionInput::new(
            rows.iter()
                .map(|&(lambda, eta, v)| Point { lambda, eta, v })
                .collect(),
        )
        .unwrap()
    }

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn exact_on_collinear_points() {
        let inp = input(&[(4.0, 11.0, 0.3), (2.0, 7.0, 2.0), (1.0, 5.0, 1.0), (0.5, 4.0, 9.0)]);
        let fit = weighted_fit(&inp, &all(4)).unwrap();
        assert!((fit.intercept - 3.0).abs() < 1e-12 && (fit.slope - 2.0).abs() < 1e-12);
        let two = input(&[(2.0, 5.0, 3.0), (1.0, 3.0, 0.1)]);
        assert!((bias_corrected_estimate(&two, &[0, 1]).unwrap() - 1.0).abs() < 1e-12);
        let r = weighted_r_squared(&inp, &all(4), &fit);
        assert!((r.explained - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_point_example_matches_normal_equations() {
        let inp = input(&[(3.0, 3.9, 4.0), (2.0, 3.1, 1.0), (1.0, 2.0, 1.0)]);
        let fit = weighted_fit(&inp, &all(3)).unwrap();
        // [Σw Σwλ; Σwλ Σwλ²] [a b]ᵀ = [Σwη Σwλη]ᵀ
        let (w, l, e) = ([0.25, 1.0, 1.0], [3.0, 2.0, 1.0], [3.9, 3.1, 2.0]);
        let s = |f: &dyn Fn(usize) -> f64| (0..3).map(f).sum::<f64>();
        let (a11, a12, a22) = (s(&|i| w[i]), s(&|i| w[i] * l[i]), s(&|i| w[i] * l[i] * l[i]));
        let (r1, r2) = (s(&|i| w[i] * e[i]), s(&|i| w[i] * l[i] * e[i]));
        let det = a11 * a22 - a12 * a12;
        let a = (r1 * a22 - a12 * r2) / det;
        assert!((fit.intercept - a).abs() < 1e-12, "{} vs {a}", fit.intercept);
        let r = weighted_r_squared(&inp, &all(3), &fit);
        assert!((r.explained - r.residual).abs() < 1e-12);
        assert!(r.explained > 0.0 && r.explained < 1.0);
    }

    #[test]
    fn singular_and_degenerate_cases() {
        let inp = input(&[(2.0, 1.0, 1.0), (1.0, 2.0, 1.0)]);
        assert!(matches!(
            weighted_fit(&inp, &[0, 0]),
            Err(Error::SingularDesign)
        ));
        assert!(weighted_fit(&inp, &[0]).is_err());
        let flat = input(&[(3.0, 2.0, 1.0), (2.0, 2.0, 2.0), (1.0, 2.0, 1.0)]);
        let fit = weighted_fit(&flat, &all(3)).unwrap();
        let r = weighted_r_squared(&flat, &all(3), &fit);
        assert!(r.zero_total && r.value() == 1.0);
        // symmetric data with no trend: slope 0, R² 0
        let sym = input(&[(3.0, 1.0, 1.0), (2.0, 0.0, 1.0), (1.0, 1.0, 1.0)]);
        let fit = weighted_fit(&sym, &all(3)).unwrap();
        assert!(fit.slope.abs() < 1e-15);
        assert!(weighted_r_squared(&sym, &all(3), &fit).value().abs() < 1e-15);
        let bad = RegressionInput::new(vec![
            Point {
                lambda: 1.0,
                eta: 0.0,
                v: 1.0,
            },
            Point {
                lambda: 1.0,
                eta: 0.0,
                v: 1.0,
            },
        ]);
        assert!(matches!(bad, Err(Error::NonDecreasingSchedule { .. })));
    }

    fn kinked(n: usize) -> RegressionInput {
        // linear for the small λ, strongly curved for the two largest
        let mut rows = Vec::new();
        for i in 0..n {
            let lambda = (n - i) as f64;
            let mut eta = 1.0 + 0.5 * lambda + 0.01 * ((i * 7919) % 13) as f64;
            if i < 2 {
                eta -= 4.0 * (2 - i) as f64;
            }
            rows.push((lambda, eta, 1.0 + (i % 3) as f64));
        }
        input(&rows)
    }

    #[test]
    fn inclusion_recovers_planted_kink() {
        let inp = kinked(12);
        let set = select_inclusion_set(&inp).unwrap();
        assert_eq!(set, (2..12).collect::<Vec<_>>());
        // independently: the R² sequence over suffixes rises then falls at the kink
        let r2: Vec<f64> = (0..9).map(|s| r2_of(&inp, &(s..12).collect::<Vec<_>>()).unwrap()).collect();
        assert!(r2[1] > r2[0] && r2[2] > r2[1] && r2[3] <= r2[2]);
    }

    #[test]
    fn inclusion_edge_cases() {
        let lin = input(&[(4.0, 9.0, 1.0), (3.0, 7.0, 2.0), (2.0, 5.0, 1.0), (1.0, 3.0, 3.0), (0.5, 2.0, 1.0)]);
        assert_eq!(select_inclusion_set(&lin).unwrap(), all(5));
        let three = input(&[(3.0, 100.0, 1.0), (2.0, 0.0, 1.0), (1.0, 1.0, 1.0)]);
        assert_eq!(select_inclusion_set(&three).unwrap(), all(3));
        let with_zero = input(&[(3.0, 7.0, 0.0), (2.0, 5.0, 1.0), (1.0, 3.0, 1.0)]);
        assert_eq!(select_inclusion_set(&with_zero).unwrap(), vec![1, 2]);
    }

    #[test]
    fn mse_decomposition_values() {
        assert_eq!(mse_decomposition(0.0, 0.3), 0.3);
        assert_eq!(mse_decomposition(0.5, 0.0), 0.25);
        assert!((mse_decomposition(-0.28409, 0.046875) - 0.127582).abs() < 1e-5);
    }

    /// Trace whose MSE proxy is minimised at index 5 from step 5 onward:
    /// a linear trend with tiny variances while the bias shrinks, then large
    /// variances beyond index 5.
    fn planted_trace() -> RegressionInput {
        let rows: Vec<(f64, f64, f64)> = (0..40)
            .map(|p| {
                let lambda = 40.0 - p as f64;
                let eta = 2.0 + 0.1 * lambda;
                let v = if p <= 5 { 1e-3 } else { 1.0 + p as f64 };
                (lambda, eta, v)
            })
            .collect();
        input(&rows)
    }

    #[test]
    fn stopping_rule_planted_index() {
        let inp = planted_trace();
        let state = apply_stopping_rule(std::slice::from_ref(&inp), 15).unwrap();
        // brute-force argmin bookkeeping
        for p in 1..=19 {
            let m = 2.0;
            let best = (0..=p)
                .min_by(|&a, &b| {
                    let f = |q: usize| mse_decomposition(inp.points[q].eta - m, inp.points[q].v);
                    f(a).total_cmp(&f(b))
                })
                .unwrap();
            assert_eq!(state.history[p], Some(best), "step {p}");
        }
        assert_eq!(state.decision, Decision::Stop { step: 19, chosen: 5 });
    }

    #[test]
    fn kappa_one_stops_when_estimate_first_defined() {
        let inp = planted_trace();
        let state = apply_stopping_rule(std::slice::from_ref(&inp), 1).unwrap();
        assert_eq!(state.history[0], None);
        assert!(matches!(state.decision, Decision::Stop { step: 1, .. }));
        assert!(StoppingState::new(0, 1).is_err());
    }

    #[test]
    fn online_replay_is_stable() {
        let inp = kinked(30);
        let a = apply_stopping_rule(std::slice::from_ref(&inp), 4).unwrap();
        let b = apply_stopping_rule(std::slice::from_ref(&inp), 4).unwrap();
        assert_eq!(a, b);
        if let Decision::Stop { step, chosen } = a.decision {
            assert!(chosen <= step);
        }
    }

    #[test]
    fn report_shape() {
        let inp = kinked(12);
        let rep = regression_report(std::slice::from_ref(&inp), None).unwrap();
        let js = serde_json::to_value(&rep).unwrap();
        for key in ["S", "intercept", "slope", "r_squared", "stopped_at", "chosen_index"] {
            assert!(js.get(key).is_some(), "{key}");
        }
        assert_eq!(rep.set, (2..12).collect::<Vec<_>>());
    }

    fn arb_trace() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
        prop::collection::vec((0.01f64..2.0, -5.0f64..5.0, 0.01f64..10.0), 4..14).prop_map(|rows| {
            let mut lambda = 0.0;
            let mut out: Vec<(f64, f64, f64)> = rows
                .into_iter()
                .map(|(dl, eta, v)| {
                    lambda += dl;
                    (lambda, eta, v)
                })
                .collect();
            out.reverse();
            out
        })
    }

    proptest! {
        #[test]
        fn variance_scale_equivariance(rows in arb_trace(), k in 0.01f64..100.0) {
            let a = input(&rows);
            let scaled: Vec<_> = rows.iter().map(|&(l, e, v)| (l, e, v * k)).collect();
            let b = input(&scaled);
            let (sa, sb) = (select_inclusion_set(&a).unwrap(), select_inclusion_set(&b).unwrap());
            prop_assert_eq!(&sa, &sb);
            let (fa, fb) = (weighted_fit(&a, &sa).unwrap(), weighted_fit(&b, &sb).unwrap());
            prop_assert!((fa.intercept - fb.intercept).abs() < 1e-9 * (1.0 + fa.intercept.abs()));
            let (ra, rb) = (weighted_r_squared(&a, &sa, &fa), weighted_r_squared(&b, &sb, &fb));
            prop_assert!((ra.value() - rb.value()).abs() < 1e-9);
        }

        #[test]
        fn affine_equivariance(rows in arb_trace(), a in -3.0f64..3.0, c in -10.0f64..10.0) {
            prop_assume!(a.abs() > 1e-3);
            let x = input(&rows);
            let mapped: Vec<_> = rows.iter().map(|&(l, e, v)| (l, a * e + c, v)).collect();
            let y = input(&mapped);
            let set = all(rows.len());
            let ex = bias_corrected_estimate(&x, &set).unwrap();
            let ey = bias_corrected_estimate(&y, &set).unwrap();
            prop_assert!((ey - (a * ex + c)).abs() < 1e-8 * (1.0 + ey.abs()));
        }

        #[test]
        fn r_squared_in_unit_interval_and_forms_agree(rows in arb_trace()) {
            let x = input(&rows);
            let set = all(rows.len());
            let fit = weighted_fit(&x, &set).unwrap();
            let r = weighted_r_squared(&x, &set, &fit);
            prop_assert!(r.explained >= -1e-12 && r.explained <= 1.0 + 1e-12);
            prop_assert!((r.explained - r.residual).abs() < 1e-9);
        }

        #[test]
        fn inclusion_drops_are_bounded(rows in arb_trace()) {
            let x = input(&rows);
            let set = select_inclusion_set(&x).unwrap();
            prop_assert!(set.len() >= 3);
            prop_assert!(rows.len() - set.len() <= rows.len() - 3);
            prop_assert_eq!(*set.last().unwrap(), rows.len() - 1);
        }

        #[test]
        fn stopping_index_never_exceeds_step(rows in arb_trace(), kappa in 1usize..5) {
            let x = input(&rows);
            let s = apply_stopping_rule(std::slice::from_ref(&x), kappa).unwrap();
            for (p, h) in s.history.iter().enumerate() {
                if let Some(i) = h { prop_assert!(*i <= p); }
            }
            prop_assert_eq!(s.clone(), apply_stopping_rule(std::slice::from_ref(&x), kappa).unwrap());
        }
    }
}
