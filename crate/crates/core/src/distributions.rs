//! Bounded-count distributions: binomial, beta-binomial, and the two
//! logit-mixture laws (binomial with a normal or Student-t latent logit).
//!
//! The logit-mixture PMF and mean have no closed form. Both are evaluated by
//! [`crate::quadrature::integrate_latent`] on the standardized latent scale,
//! entirely in the log domain so that extreme counts do not underflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln_choose, ln_rising, log_sigmoid, sigmoid};
use crate::quadrature::{integrate_latent, Kernel, LatentLaw, LatentQuadrature};

/// Location, scale and degrees of freedom of the latent logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentTParams {
    pub eta: f64,
    pub sigma: f64,
    pub nu: f64,
}

impl LatentTParams {
    pub fn new(eta: f64, sigma: f64, nu: f64) -> Result<Self> {
        let p = Self { eta, sigma, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() {
            return Err(Error::domain(format!("latent location must be finite, got {}", self.eta)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::domain(format!("latent scale must be positive, got {}", self.sigma)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::domain(format!("degrees of freedom must be positive, got {}", self.nu)));
        }
        Ok(())
    }

    /// Variance of the latent variable under the Student-t law; undefined
    /// for `nu <= 2`.
    pub fn variance(&self) -> Result<f64> {
        if self.nu <= 2.0 {
            return Err(Error::domain(format!(
                "latent variance undefined for nu = {} <= 2",
                self.nu
            )));
        }
        Ok(self.nu / (self.nu - 2.0) * self.sigma * self.sigma)
    }
}

/// A point of the bounded-count support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundedCountSupport {
    m: u32,
    k: u32,
}

impl BoundedCountSupport {
    pub fn new(k: u32, m: u32) -> Result<Self> {
        if k > m {
            return Err(Error::domain(format!("count {k} outside support [0, {m}]")));
        }
        Ok(Self { m, k })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn m(&self) -> u32 {
        self.m
    }
}

/// Mean/dispersion parameterization of the beta-binomial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaBinomialParams {
    p: f64,
    delta: f64,
}

impl BetaBinomialParams {
    pub fn new(p: f64, delta: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("beta-binomial mean must lie in (0, 1), got {p}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::domain(format!("beta-binomial dispersion must be positive and finite, got {delta}")));
        }
        Ok(Self { p, delta })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn theta(&self) -> f64 {
        self.p * self.delta
    }

    pub fn gamma(&self) -> f64 {
        (1.0 - self.p) * self.delta
    }
}

/// Latent distribution family of the logit-mixture laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentFamily {
    Normal,
    StudentT,
}

impl LatentFamily {
    fn law(self, nu: f64) -> LatentLaw {
        match self {
            LatentFamily::Normal => LatentLaw::Normal,
            LatentFamily::StudentT => LatentLaw::StudentT { nu },
        }
    }
}

fn check_support(k: u32, m: u32) -> Result<()> {
    BoundedCountSupport::new(k, m).map(|_| ())
}

pub fn binomial_log_pmf(k: u32, m: u32, p: f64) -> Result<f64> {
    check_support(k, m)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("binomial probability must lie in (0, 1), got {p}")));
    }
    Ok(ln_choose(m, k) + k as f64 * p.ln() + (m - k) as f64 * (-p).ln_1p())
}

pub fn beta_binomial_log_pmf(k: u32, m: u32, params: &BetaBinomialParams) -> Result<f64> {
    check_support(k, m)?;
    let (theta, gamma) = (params.theta(), params.gamma());
    if !(theta.is_finite() && gamma.is_finite()) {
        return Err(Error::domain("non-finite beta-binomial shape"));
    }
    Ok(beta_binomial_log_pmf_unchecked(k, m, theta, gamma))
}

/// `ln C(m,k) + ln B(k+θ, m−k+γ) − ln B(θ, γ)` written as rising factorials.
#[inline]
pub(crate) fn beta_binomial_log_pmf_unchecked(k: u32, m: u32, theta: f64, gamma: f64) -> f64 {
    ln_choose(m, k) + ln_rising(theta, k) + ln_rising(gamma, m - k) - ln_rising(theta + gamma, m)
}

/// `ln C(m,k) + k·ln σ(ξ) + (m−k)·ln(1−σ(ξ))`, with zero-multiplicity terms
/// skipped so the limits at `ξ = ±∞` are well defined.
#[inline]
pub(crate) fn binomial_log_kernel(k: u32, m: u32, ln_coef: f64, xi: f64) -> f64 {
    let mut v = ln_coef;
    if k > 0 {
        v += k as f64 * log_sigmoid(xi);
    }
    if k < m {
        v += (m - k) as f64 * log_sigmoid(-xi);
    }
    v
}

/// Feature width of the binomial kernel on the logit scale near count `k`.
fn kernel_width(k: u32, m: u32) -> f64 {
    let p = (k as f64 + 0.5) / (m as f64 + 1.0);
    1.0 / (m as f64 * p * (1.0 - p)).max(0.25).sqrt()
}

/// Log-PMF of the binomial-logit-normal (`family = Normal`, `nu` ignored) or
/// binomial-logit-t law.
pub fn logit_mixture_log_pmf(
    k: u32,
    m: u32,
    latent: &LatentTParams,
    family: LatentFamily,
) -> Result<f64> {
    check_support(k, m)?;
    latent.validate()?;
    logit_mixture_log_pmf_with(k, m, latent, family, &LatentQuadrature::default())
}

pub(crate) fn logit_mixture_log_pmf_with(
    k: u32,
    m: u32,
    latent: &LatentTParams,
    family: LatentFamily,
    settings: &LatentQuadrature,
) -> Result<f64> {
    let ln_coef = ln_choose(m, k);
    let mode = if k == 0 {
        f64::NEG_INFINITY
    } else if k == m {
        f64::INFINITY
    } else {
        (k as f64 / (m - k) as f64).ln()
    };
    let anchor_p = (k as f64 + 0.5) / (m as f64 + 1.0);
    let width = kernel_width(k, m);
    let kernel = Kernel {
        log_kernel: |xi: f64| binomial_log_kernel(k, m, ln_coef, xi),
        mode,
        anchor: (anchor_p / (1.0 - anchor_p)).ln(),
        scales: &[width],
    };
    integrate_latent(&kernel, latent.eta, latent.sigma, family.law(latent.nu), settings)
}

/// Full PMF table over `0..=m`.
pub fn logit_mixture_pmf_table(m: u32, latent: &LatentTParams, family: LatentFamily) -> Result<Vec<f64>> {
    (0..=m)
        .map(|k| logit_mixture_log_pmf(k, m, latent, family).map(f64::exp))
        .collect()
}

/// `m · logit⁻¹(η)`.
pub fn pseudo_median(m: u32, eta: f64) -> f64 {
    m as f64 * sigmoid(eta)
}

/// Cumulative probabilities within this of one half count as reaching it, so
/// exact ties such as `η = 0` with odd `m` are not decided by rounding.
pub const MEDIAN_TIE_TOLERANCE: f64 = 1e-12;

/// Left-most integer whose cumulative probability reaches one half.
pub fn discrete_median(pmf: &[f64]) -> Result<u32> {
    if pmf.is_empty() {
        return Err(Error::domain("empty pmf"));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::domain("pmf entries must be finite and non-negative"));
    }
    let total: f64 = pmf.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::domain(format!("pmf sums to {total}, not 1")));
    }
    let mut cdf = 0.0;
    for (k, p) in pmf.iter().enumerate() {
        cdf += p;
        if cdf >= 0.5 - MEDIAN_TIE_TOLERANCE {
            return Ok(k as u32);
        }
    }
    Ok((pmf.len() - 1) as u32)
}

/// `E[Y] = ∫ m·logit⁻¹(ξ) f(ξ) dξ` for the logit-mixture laws.
pub fn mixture_mean(m: u32, latent: &LatentTParams, family: LatentFamily) -> Result<f64> {
    latent.validate()?;
    if m == 0 {
        return Ok(0.0);
    }
    let kernel = Kernel {
        log_kernel: log_sigmoid,
        mode: f64::INFINITY,
        anchor: 0.0,
        scales: &[1.0],
    };
    let ln_mean = integrate_latent(
        &kernel,
        latent.eta,
        latent.sigma,
        family.law(latent.nu),
        &LatentQuadrature::default(),
    )?;
    Ok(m as f64 * ln_mean.exp())
}
