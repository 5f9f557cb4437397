use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `x ~ N(z, c_j λ I)`.
    Gaussian,
    /// `log x ~ N(log z, c_j λ I)`, coordinatewise.
    LogNormal,
}

/// The kernels `K_j^(λ)(z, ·)` linking the global variable to each local copy.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFamily {
    pub kind: KernelKind,
    pub scales: Vec<f64>,
}

impl KernelFamily {
    pub fn new(kind: KernelKind, scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::config("kernel_scales", "at least one block is required"));
        }
        if let Some(c) = scales.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(Error::config("kernel_scales", format!("scale {c} is not positive")));
        }
        Ok(KernelFamily { kind, scales })
    }

    pub fn blocks(&self) -> usize {
        self.scales.len()
    }

    #[inline]
    pub fn variance(&self, j: usize, lambda: f64) -> f64 {
        self.scales[j] * lambda
    }

    /// Map a point into the space where the kernel is Gaussian.
    #[inline]
    pub fn to_gaussian_space(&self, v: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => v,
            KernelKind::LogNormal => v.ln(),
        }
    }

    #[inline]
    pub fn from_gaussian_space(&self, v: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => v,
            KernelKind::LogNormal => v.exp(),
        }
    }

    fn check(&self, pts: &[f64]) -> Result<()> {
        if self.kind == KernelKind::LogNormal {
            if let Some(v) = pts.iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain(format!(
                    "log-normal kernel requires positive coordinates, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Squared kernel distance `Σ_i (g(x_i) − g(z_i))²` with `g` the identity or `log`.
    pub fn sq_distance(&self, z: &[f64], x: &[f64]) -> f64 {
        z.iter()
            .zip(x)
            .map(|(&a, &b)| {
                let d = self.to_gaussian_space(b) - self.to_gaussian_space(a);
                d * d
            })
            .sum()
    }

    pub fn log_density(&self, j: usize, lambda: f64, z: &[f64], x: &[f64]) -> Result<f64> {
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
        }
        self.check(z)?;
        self.check(x)?;
        let var = self.variance(j, lambda);
        let d = z.len() as f64;
        let mut lp = -0.5 * d * (2.0 * PI * var).ln() - self.sq_distance(z, x) / (2.0 * var);
        if self.kind == KernelKind::LogNormal {
            lp -= x.iter().map(|v| v.ln()).sum::<f64>();
        }
        Ok(lp)
    }

    pub fn sample<R: rand::Rng + ?Sized>(
        &self,
        j: usize,
        lambda: f64,
        z: &[f64],
        rng: &mut R,
    ) -> Vec<f64> {
        let sd = self.variance(j, lambda).sqrt();
        z.iter()
            .map(|&zi| {
                let g = self.to_gaussian_space(zi) + sd * standard_normal(rng);
                self.from_gaussian_space(g)
            })
            .collect()
    }
}
