//! Adaptive Gauss–Hermite quadrature for one-dimensional log-integrands.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

pub const DEFAULT_NODES: usize = 64;

impl Default for GaussHermite {
    fn default() -> Self {
        GaussHermite::new(DEFAULT_NODES)
    }
}

impl GaussHermite {
    /// Nodes and weights for `∫ e^{-t²} g(t) dt`. Nodes come from the
    /// Golub–Welsch eigenproblem; weights from the Christoffel function
    /// `1 / Σ_k p_k(t)²` of the orthonormal Hermite polynomials, which stays
    /// accurate in the tails where eigenvector components underflow.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "at least one node is required");
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = off;
            jacobi[(k, k - 1)] = off;
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.total_cmp(b));
        let log_weights = nodes
            .iter()
            .map(|&t| {
                let mut prev = 0.0;
                let mut cur = std::f64::consts::PI.powf(-0.25);
                let mut sum = cur * cur;
                for k in 0..n - 1 {
                    let kf = k as f64;
                    let next = (2.0 / (kf + 1.0)).sqrt() * t * cur - (kf / (kf + 1.0)).sqrt() * prev;
                    prev = cur;
                    cur = next;
                    sum += cur * cur;
                }
                -sum.ln()
            })
            .collect();
        GaussHermite { nodes, log_weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `log ∫ exp(g(u)) du`, recentred at the mode of `g` and rescaled by its
    /// curvature. `start` and `scale` seed the mode search.
    pub fn log_integrate(&self, g: impl Fn(f64) -> f64, start: f64, scale: f64) -> Result<f64> {
        let (mode, sigma) = locate_mode(&g, start, scale)?;
        let root2s = std::f64::consts::SQRT_2 * sigma;
        let terms: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.log_weights)
            .map(|(&t, &lw)| lw + t * t + g(mode + root2s * t))
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::Domain("integrand vanishes at every node".into()));
        }
        let sum: f64 = terms.iter().map(|v| (v - top).exp()).sum();
        Ok(top + sum.ln() + root2s.ln())
    }
}

/// Damped Newton search with finite-difference derivatives.
fn locate_mode(g: &impl Fn(f64) -> f64, start: f64, scale: f64) -> Result<(f64, f64)> {
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let h = 1e-3 * scale;
    let derivs = |u: f64| {
        let (gp, g0, gm) = (g(u + h), g(u), g(u - h));
        ((gp - gm) / (2.0 * h), (gp - 2.0 * g0 + gm) / (h * h), g0)
    };
    let mut u = start;
    let (mut d1, mut d2, mut gu) = derivs(u);
    if !gu.is_finite() {
        return Err(Error::Domain(format!("log-integrand is not finite at {start}")));
    }
    for _ in 0..200 {
        let mut step = if d2 < 0.0 { -d1 / d2 } else { d1.signum() * scale };
        step = step.clamp(-10.0 * scale, 10.0 * scale);
        let mut accepted = false;
        for _ in 0..50 {
            let cand = u + step;
            let gc = g(cand);
            if gc.is_finite() && gc >= gu - 1e-12 * gu.abs().max(1.0) {
                u = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        (d1, d2, gu) = derivs(u);
        if !accepted || step.abs() < 1e-10 * scale {
            break;
        }
    }
    let sigma = if d2 < 0.0 { (-1.0 / d2).sqrt() } else { scale };
    Ok((u, sigma))
}
