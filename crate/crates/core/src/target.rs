//! Closed-form Gaussian-mixture data distribution with diagonal covariances.
//!
//! Adding Gaussian noise of standard deviation `sigma` keeps the mixture closed
//! form: every component variance is inflated by `sigma^2`. Scores, posterior
//! means (the denoiser) and component posteriors follow analytically, which
//! replaces a trained denoiser network everywhere in this crate.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::divergence::check_probability_vector;
use crate::error::{invalid, Error, Result};

/// Serializable description of a mixture (`weights`, `means`, `variances`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        check_probability_vector(&weights, "mixture weights")?;
        let k = weights.len();
        if means.len() != k || variances.len() != k {
            return Err(invalid(format!(
                "mixture has {k} weights but {} means and {} variance vectors",
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("mixture dimension must be at least 1"));
        }
        for (m, v) in means.iter().zip(&variances) {
            if m.len() != dim || v.len() != dim {
                return Err(Error::ShapeMismatch { expected: dim, actual: m.len().min(v.len()) });
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(invalid("mixture means must be finite"));
            }
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(invalid("mixture variances must be positive"));
            }
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { weights, log_weights, means, variances, dim })
    }

    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        Self::new(spec.weights.clone(), spec.means.clone(), spec.variances.clone())
    }

    pub fn to_spec(&self) -> MixtureSpec {
        MixtureSpec {
            weights: self.weights.clone(),
            means: self.means.clone(),
            variances: self.variances.clone(),
        }
    }

    /// Isotropic Gaussian `N(mean, variance I)`.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![1.0], vec![mean], vec![vec![variance; d]])
    }

    /// `k` equal-weight isotropic components evenly spaced on a circle in 2D.
    pub fn ring(k: usize, radius: f64, std: f64) -> Result<Self> {
        if k == 0 {
            return Err(invalid("ring needs at least one component"));
        }
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(vec![1.0 / k as f64; k], means, vec![vec![std * std; 2]; k])
    }

    /// Same components, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(weights, self.means.clone(), self.variances.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// Largest per-dimension component standard deviation.
    pub fn max_component_std(&self) -> f64 {
        self.variances.iter().flatten().fold(0.0f64, |m, v| m.max(v.sqrt()))
    }

    /// Root-mean-square per-dimension standard deviation of the clean data.
    pub fn data_std(&self) -> f64 {
        let mut total = 0.0;
        for j in 0..self.dim {
            let mean: f64 = self.weights.iter().zip(&self.means).map(|(w, m)| w * m[j]).sum();
            let second: f64 = self
                .weights
                .iter()
                .zip(self.means.iter().zip(&self.variances))
                .map(|(w, (m, v))| w * (v[j] + m[j] * m[j]))
                .sum();
            total += second - mean * mean;
        }
        (total / self.dim as f64).sqrt()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch { expected: self.dim, actual: x.len() });
        }
        Ok(())
    }

    fn check_cond(&self, cond: Option<usize>) -> Result<()> {
        match cond {
            Some(c) if c >= self.num_components() => Err(invalid(format!(
                "component {c} out of range for a {}-component mixture",
                self.num_components()
            ))),
            _ => Ok(()),
        }
    }

    fn check_sigma(sigma: f64) -> Result<()> {
        if sigma.is_finite() && sigma >= 0.0 {
            Ok(())
        } else {
            Err(Error::Domain(format!("noise level must be non-negative, got {sigma}")))
        }
    }

    /// Log-density of component `k` inflated by `sigma^2`, without the mixture weight.
    fn component_log_density(&self, k: usize, x: &[f64], s2: f64) -> f64 {
        let mut acc = 0.0;
        for ((xi, mi), vi) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            let v = vi + s2;
            let d = xi - mi;
            acc += d * d / v + (2.0 * PI * v).ln();
        }
        -0.5 * acc
    }

    /// `ln w_k + ln N_k(x; sigma)` for every component.
    fn joint_log_terms(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        (0..self.num_components())
            .map(|k| self.log_weights[k] + self.component_log_density(k, x, s2))
            .collect()
    }

    pub fn log_density(&self, x: &[f64], sigma: f64, cond: Option<usize>) -> Result<f64> {
        self.check_point(x)?;
        Self::check_sigma(sigma)?;
        self.check_cond(cond)?;
        if let Some(c) = cond {
            return Ok(self.component_log_density(c, x, sigma * sigma));
        }
        Ok(log_sum_exp(&self.joint_log_terms(x, sigma)))
    }

    /// Posterior probability of each component given the noisy point.
    pub fn class_posterior(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Self::check_sigma(sigma)?;
        Ok(self.posterior_unchecked(x, sigma))
    }

    fn posterior_unchecked(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let mut terms = self.joint_log_terms(x, sigma);
        let lse = log_sum_exp(&terms);
        for t in terms.iter_mut() {
            *t = (*t - lse).exp();
        }
        terms
    }

    fn responsibilities(&self, x: &[f64], sigma: f64, cond: Option<usize>) -> Vec<f64> {
        match cond {
            Some(c) => {
                let mut r = vec![0.0; self.num_components()];
                r[c] = 1.0;
                r
            }
            None => self.posterior_unchecked(x, sigma),
        }
    }

    /// Gradient of `log_density` in `x`: posterior-weighted component scores.
    pub fn score(&self, x: &[f64], sigma: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Self::check_sigma(sigma)?;
        self.check_cond(cond)?;
        let s2 = sigma * sigma;
        let resp = self.responsibilities(x, sigma, cond);
        let mut out = vec![0.0; self.dim];
        for (k, r) in resp.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            for j in 0..self.dim {
                out[j] -= r * (x[j] - self.means[k][j]) / (self.variances[k][j] + s2);
            }
        }
        Ok(out)
    }

    /// Posterior mean of the clean sample, via `x + sigma^2 * score(x, sigma)`.
    pub fn denoise(&self, x: &[f64], sigma: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        let score = self.score(x, sigma, cond)?;
        let s2 = sigma * sigma;
        Ok(x.iter().zip(&score).map(|(xi, si)| xi + s2 * si).collect())
    }

    /// Posterior mean computed directly as a mixture of component posterior means.
    /// Independent of [`Self::denoise`]; the two agree up to rounding.
    pub fn posterior_mean(&self, x: &[f64], sigma: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Self::check_sigma(sigma)?;
        self.check_cond(cond)?;
        let s2 = sigma * sigma;
        let resp = self.responsibilities(x, sigma, cond);
        let mut out = vec![0.0; self.dim];
        for (k, r) in resp.iter().enumerate() {
            for j in 0..self.dim {
                let v = self.variances[k][j];
                let m = self.means[k][j];
                out[j] += r * (m + v / (v + s2) * (x[j] - m));
            }
        }
        Ok(out)
    }

    /// Draw one clean sample together with its component label.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let k = if self.num_components() == 1 {
            0
        } else {
            WeightedIndex::new(&self.weights).expect("validated weights").sample(rng)
        };
        let x = (0..self.dim)
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                self.means[k][j] + self.variances[k][j].sqrt() * z
            })
            .collect();
        (x, k)
    }

    /// `n` i.i.d. draws of `x0 + sigma z` with `x0` from the mixture.
    pub fn sample_expert<R: Rng + ?Sized>(&self, sigma: f64, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        Self::check_sigma(sigma)?;
        if n == 0 {
            return Err(invalid("sample count must be at least 1"));
        }
        Ok((0..n)
            .map(|_| {
                let (mut x, _) = self.sample_labeled(rng);
                if sigma > 0.0 {
                    for xi in x.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *xi += sigma * z;
                    }
                }
                x
            })
            .collect())
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}
