//! Diagonal Gaussian latent distributions.
//!
//! The scalar API ([`DiagonalGaussian`]) works on one latent vector. The
//! graph API ([`GaussianVars`]) carries a batch of distributions as `(B, N)`
//! tensors inside an autodiff [`Graph`] so that sampling and KL terms are
//! differentiable with respect to the distribution parameters.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("a Gaussian needs at least one dimension"));
        }
        if mean.len() != scale.len() {
            return Err(Error::Dimension { expected: mean.len(), got: scale.len() });
        }
        if let Some(i) = scale.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("scale[{i}] = {} is not positive", scale[i])));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("Gaussian mean".into()));
        }
        Ok(DiagonalGaussian { mean, scale })
    }

    /// Zero mean, unit scale.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: len });
        }
        Ok(())
    }

    /// Reparameterized draw `mean + scale * noise`.
    pub fn sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_len(noise.len())?;
        Ok(self.mean.iter().zip(&self.scale).zip(noise).map(|((m, s), e)| m + s * e).collect())
    }

    pub fn log_density(&self, point: &[f64]) -> Result<f64> {
        self.check_len(point.len())?;
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        Ok(self
            .mean
            .iter()
            .zip(&self.scale)
            .zip(point)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -half_log_2pi - s.ln() - 0.5 * z * z
            })
            .sum())
    }

    /// `KL(self || other)` in closed form.
    pub fn kl_divergence(&self, other: &DiagonalGaussian) -> Result<f64> {
        other.check_len(self.dim())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.scale)
            .zip(other.mean.iter().zip(&other.scale))
            .map(|((pm, ps), (qm, qs))| {
                let d = pm - qm;
                (qs / ps).ln() + (ps * ps + d * d) / (2.0 * qs * qs) - 0.5
            })
            .sum())
    }
}

pub fn sample(dist: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    dist.sample(noise)
}

pub fn log_density(dist: &DiagonalGaussian, point: &[f64]) -> Result<f64> {
    dist.log_density(point)
}

pub fn kl_divergence(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    p.kl_divergence(q)
}

/// A realization of the latent pair: `a` drives the feature means and `b`
/// the feature standard deviations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatentSample {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub log_density: f64,
}

/// The pair of independent Gaussians emitted by a prior or posterior head.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnhancementDistribution {
    pub mean_stat: DiagonalGaussian,
    pub std_stat: DiagonalGaussian,
}

impl EnhancementDistribution {
    pub fn new(mean_stat: DiagonalGaussian, std_stat: DiagonalGaussian) -> Result<Self> {
        if mean_stat.dim() != std_stat.dim() {
            return Err(Error::Dimension { expected: mean_stat.dim(), got: std_stat.dim() });
        }
        Ok(EnhancementDistribution { mean_stat, std_stat })
    }

    pub fn dim(&self) -> usize {
        self.mean_stat.dim()
    }

    /// Draw `(a, b)` from the two factors and record the joint log-density.
    pub fn sample(&self, noise_a: &[f64], noise_b: &[f64]) -> Result<LatentSample> {
        let a = self.mean_stat.sample(noise_a)?;
        let b = self.std_stat.sample(noise_b)?;
        let log_density = self.log_density(&a, &b)?;
        Ok(LatentSample { a, b, log_density })
    }

    pub fn log_density(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(self.mean_stat.log_density(a)? + self.std_stat.log_density(b)?)
    }

    /// The density maximizer `(mean_stat.mean, std_stat.mean)`.
    pub fn mode(&self) -> LatentSample {
        let a = self.mean_stat.mean().to_vec();
        let b = self.std_stat.mean().to_vec();
        let log_density = self.log_density(&a, &b).expect("dimensions match by construction");
        LatentSample { a, b, log_density }
    }

    /// `(KL over the mean factor, KL over the std factor)`.
    pub fn kl_divergence(&self, other: &EnhancementDistribution) -> Result<(f64, f64)> {
        Ok((
            self.mean_stat.kl_divergence(&other.mean_stat)?,
            self.std_stat.kl_divergence(&other.std_stat)?,
        ))
    }
}

/// A batch of diagonal Gaussians living in a graph; both tensors are `(B, N)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub scale: Var,
}

impl GaussianVars {
    /// Reparameterized sample `mean + scale * noise`; `noise` is `(B, N)`.
    pub fn sample<F: Real>(&self, g: &mut Graph<'_, F>, noise: Var) -> Var {
        let spread = g.mul(self.scale, noise);
        g.add(self.mean, spread)
    }

    /// Elementwise `KL(self || other)` terms, shape `(B, N)`.
    pub fn kl_terms<F: Real>(&self, g: &mut Graph<'_, F>, other: &GaussianVars) -> Var {
        let log_q = g.log(other.scale);
        let log_p = g.log(self.scale);
        let log_ratio = g.sub(log_q, log_p);
        let p_var = g.square(self.scale);
        let diff = g.sub(self.mean, other.mean);
        let diff_sq = g.square(diff);
        let num = g.add(p_var, diff_sq);
        let q_var = g.square(other.scale);
        let den = g.scale(q_var, 2.0);
        let ratio = g.div(num, den);
        let sum = g.add(log_ratio, ratio);
        g.offset(sum, -0.5)
    }

    /// Batch-mean of the per-element KL summed over latent dimensions.
    pub fn kl_divergence<F: Real>(&self, g: &mut Graph<'_, F>, other: &GaussianVars) -> Var {
        let terms = self.kl_terms(g, other);
        let dim = g.value(terms).shape()[1];
        let mean = g.mean_all(terms);
        g.scale(mean, dim as f64)
    }

    /// Extract batch element `n` as a plain [`DiagonalGaussian`].
    pub fn to_gaussian<F: Real>(&self, g: &Graph<'_, F>, n: usize) -> Result<DiagonalGaussian> {
        let row = |v: Var| -> Result<Vec<f64>> {
            let (b, dim) = g.value(v).dims2()?;
            if n >= b {
                return Err(Error::invalid(format!("batch index {n} out of range for batch {b}")));
            }
            Ok(g.value(v).data()[n * dim..(n + 1) * dim].iter().map(|x| x.as_f64()).collect())
        };
        DiagonalGaussian::new(row(self.mean)?, row(self.scale)?)
    }
}
