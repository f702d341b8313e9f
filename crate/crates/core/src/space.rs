//! The trainable latent sampling space: a mixture of diagonal Gaussians.
//!
//! Variances are held as log-variances and weights as unnormalised scores so
//! that every finite parameter vector is a valid space. All density work is
//! done in log space; the naive product of `D` Gaussian densities underflows
//! long before `D` gets interesting.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_COMPONENTS: usize = 4;
pub const DEFAULT_LATENT_DIM: usize = 8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpace {
    m: usize,
    d: usize,
    means: Vec<f64>,
    log_variances: Vec<f64>,
    raw_weights: Vec<f64>,
}

/// One draw `vector = mean[component] + sqrt(var[component]) ⊙ noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub vector: Vec<f64>,
    pub component: usize,
    pub noise: Vec<f64>,
}

impl MixtureSpace {
    pub fn new(m: usize, d: usize, means: Vec<f64>, log_variances: Vec<f64>, raw_weights: Vec<f64>) -> Result<Self> {
        let space = Self { m, d, means, log_variances, raw_weights };
        space.validate()?;
        Ok(space)
    }

    /// Builds a space from explicit variances and simplex weights.
    pub fn from_moments(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let m = means.len();
        let d = means.first().map_or(0, Vec::len);
        if variances.len() != m || weights.len() != m {
            return Err(Error::Shape("means, variances and weights disagree on M".into()));
        }
        if let Some(v) = variances.iter().flatten().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!("variance {v} is not positive")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::InvalidArgument(format!("weight {w} is not positive")));
        }
        Self::new(
            m,
            d,
            means.into_iter().flatten().collect(),
            variances.into_iter().flatten().map(f64::ln).collect(),
            weights.into_iter().map(f64::ln).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 {
            return Err(Error::InvalidArgument(format!("mixture needs M ≥ 1 and D ≥ 1, got M={} D={}", self.m, self.d)));
        }
        if self.means.len() != self.m * self.d || self.log_variances.len() != self.m * self.d {
            return Err(Error::Shape(format!("means/log-variances must hold M×D = {} values", self.m * self.d)));
        }
        if self.raw_weights.len() != self.m {
            return Err(Error::Shape(format!("{} raw weights for M={}", self.raw_weights.len(), self.m)));
        }
        let all = self.means.iter().chain(&self.log_variances).chain(&self.raw_weights);
        if let Some(v) = all.into_iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mixture parameter {v}")));
        }
        if self.log_variances.iter().any(|lv| lv.exp() <= 0.0) {
            return Err(Error::InvalidArgument("variance underflows to zero".into()));
        }
        let w = self.weights();
        if w.iter().any(|&x| x <= 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights {w:?} are not a strictly positive simplex")));
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mean(&self, m: usize) -> &[f64] {
        &self.means[m * self.d..(m + 1) * self.d]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn log_variances(&self) -> &[f64] {
        &self.log_variances
    }

    pub fn raw_weights(&self) -> &[f64] {
        &self.raw_weights
    }

    pub fn variance(&self, m: usize) -> Vec<f64> {
        self.log_variances[m * self.d..(m + 1) * self.d].iter().map(|v| v.exp()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.raw_weights)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Shape(format!("latent has {} entries, space has D={}", x.len(), self.d)));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent coordinate {v}")));
        }
        Ok(())
    }

    /// `ln π_m + ln N(x; μ_m, diag σ²_m)` for each component.
    fn joint_log_terms(&self, x: &[f64]) -> Vec<f64> {
        let log_w = log_softmax(&self.raw_weights);
        (0..self.m)
            .map(|m| {
                let mu = self.mean(m);
                let lv = &self.log_variances[m * self.d..(m + 1) * self.d];
                let quad: f64 = x
                    .iter()
                    .zip(mu)
                    .zip(lv)
                    .map(|((xi, mi), lvi)| (xi - mi) * (xi - mi) * (-lvi).exp() + lvi)
                    .sum();
                log_w[m] - 0.5 * (quad + self.d as f64 * LN_2PI)
            })
            .collect()
    }

    /// Posterior responsibility of each component for observation `x`.
    pub fn component_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(softmax(&self.joint_log_terms(x)))
    }

    /// Mixture log-density `ln Σ_m π_m N(x; μ_m, σ²_m)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(log_sum_exp(&self.joint_log_terms(x)))
    }

    /// `n` reparameterised draws; components are categorical in the weights.
    pub fn draw_samples(&self, n: usize, seed: u64) -> Result<Vec<LatentSample>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument("draw_samples needs n ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let categorical = WeightedIndex::new(self.weights())
            .map_err(|e| Error::InvalidArgument(format!("mixture weights: {e}")))?;
        Ok((0..n)
            .map(|_| {
                let component = categorical.sample(&mut rng);
                let noise: Vec<f64> = (0..self.d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let vector = self.reparameterize(component, &noise);
                LatentSample { vector, component, noise }
            })
            .collect())
    }

    pub fn reparameterize(&self, component: usize, noise: &[f64]) -> Vec<f64> {
        let mu = self.mean(component);
        let lv = &self.log_variances[component * self.d..(component + 1) * self.d];
        noise
            .iter()
            .zip(mu)
            .zip(lv)
            .map(|((e, m), l)| m + (0.5 * l).exp() * e)
            .collect()
    }
}

/// Softmax of unnormalised scores onto the simplex.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("no weights to normalise".into()));
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("raw weight {v}")));
    }
    Ok(softmax(raw))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Monte-Carlo estimate of `KL(p ‖ q)` with its standard error.
pub fn kl_monte_carlo(p: &MixtureSpace, q: &MixtureSpace, draws: usize, seed: u64) -> Result<(f64, f64)> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("KL between D={} and D={}", p.dim(), q.dim())));
    }
    if draws < 2 {
        return Err(Error::InvalidArgument("KL estimate needs at least two draws".into()));
    }
    let samples = p.draw_samples(draws, seed)?;
    let terms = samples
        .iter()
        .map(|s| Ok(p.log_density(&s.vector)? - q.log_density(&s.vector)?))
        .collect::<Result<Vec<f64>>>()?;
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
