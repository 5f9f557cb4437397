//! Mode finding and Laplace approximations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Derivs, ModelSpec};

#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub mode: Vec<f64>,
    /// `−∇² log p` at the mode.
    pub neg_hessian: DMatrix<f64>,
    pub iterations: usize,
}

impl LaplaceFit {
    /// Inverse of the negative Hessian, if it is positive definite.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        self.neg_hessian.clone().cholesky().map(|c| c.inverse())
    }
}

fn eval(f: &impl Fn(&[f64]) -> Result<Derivs>, x: &[f64]) -> Result<Option<Derivs>> {
    match f(x) {
        Ok(d) if d.value.is_finite() => Ok(Some(d)),
        Ok(_) | Err(Error::Domain(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Damped Newton ascent with backtracking line search. A ridge is added to
/// the negative Hessian until it factorises, so the step is always an
/// ascent direction.
pub fn find_mode(
    f: impl Fn(&[f64]) -> Result<Derivs>,
    start: &[f64],
    max_iter: usize,
) -> Result<LaplaceFit> {
    let dim = start.len();
    let mut x = start.to_vec();
    let mut cur = eval(&f, &x)?
        .ok_or_else(|| Error::Domain("mode search started outside the support".into()))?;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let g = DVector::from_column_slice(&cur.gradient);
        if g.amax() < 1e-10 {
            break;
        }
        let neg_h = -&cur.hessian;
        let mut ridge = 0.0;
        let dir = loop {
            let mut m = neg_h.clone();
            for i in 0..dim {
                m[(i, i)] += ridge;
            }
            if let Some(ch) = m.cholesky() {
                break ch.solve(&g);
            }
            ridge = if ridge == 0.0 { 1e-6 * (1.0 + neg_h.amax()) } else { ridge * 10.0 };
            if ridge > 1e12 {
                break g.clone();
            }
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            if let Some(d) = eval(&f, &cand)? {
                if d.value >= cur.value {
                    let gain = d.value - cur.value;
                    x = cand;
                    cur = d;
                    moved = true;
                    if gain < 1e-14 * cur.value.abs().max(1.0) && t < 1.0 {
                        t = 0.0;
                    }
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved || t == 0.0 {
            break;
        }
    }
    Ok(LaplaceFit {
        mode: x,
        neg_hessian: -cur.hessian,
        iterations,
    })
}

/// Mode of the posterior `μ Π f_j` with its curvature.
pub fn posterior_mode(model: &ModelSpec, start: &[f64]) -> Result<LaplaceFit> {
    find_mode(
        |z| {
            let mut total = model.prior_derivs(z)?;
            for j in 0..model.blocks() {
                total.add_scaled(&model.likelihood_derivs(j, z)?, 1.0);
            }
            Ok(total)
        },
        start,
        200,
    )
}
