//! Log-prior densities.
//!
//! Every gamma density here is in the shape-rate parameterization. The
//! random-effects covariance uses the matrix-generalized half-t (MGH-t)
//! construction: diagonal auxiliaries `ψ_k ~ Gamma(1/2, 1/A²)` and
//! `Σ⁻¹ | Ψ ~ Wishart(ν + d − 1, (2νΨ)⁻¹)`, which gives each standard
//! deviation a half-t(ν, A) marginal and, for `ν = 2`, uniform correlations.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_chol, sample_wishart, spd_inverse};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Variance of the independent normal priors on fixed effects.
    pub beta_variance: f64,
    /// Half-t scale and df for the latent scale `σ`.
    pub sigma_halft_scale: f64,
    pub sigma_halft_df: f64,
    /// Gamma shape and rate for the beta-binomial dispersion `δ`.
    pub delta_gamma_shape: f64,
    pub delta_gamma_rate: f64,
    /// Rate of the exponential prior on the auxiliary `ε`.
    pub nu_exp_rate: f64,
    /// Shape of the gamma prior `ν | ε ~ Gamma(shape, ε)`.
    pub nu_gamma_shape: f64,
    /// Half-t scale `A` of each random-effect SD; the auxiliary rate is `1/A²`.
    pub mght_scale: f64,
    pub mght_df: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta_variance: 1000.0,
            sigma_halft_scale: 4.0,
            sigma_halft_df: 2.0,
            delta_gamma_shape: 0.001,
            delta_gamma_rate: 0.001,
            nu_exp_rate: 0.25,
            nu_gamma_shape: 2.0,
            mght_scale: 2500.0,
            mght_df: 2.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("beta_variance", self.beta_variance),
            ("sigma_halft_scale", self.sigma_halft_scale),
            ("sigma_halft_df", self.sigma_halft_df),
            ("delta_gamma_shape", self.delta_gamma_shape),
            ("delta_gamma_rate", self.delta_gamma_rate),
            ("nu_exp_rate", self.nu_exp_rate),
            ("nu_gamma_shape", self.nu_gamma_shape),
            ("mght_scale", self.mght_scale),
            ("mght_df", self.mght_df),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prior `{name}` must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Rate of the gamma prior on each `ψ_k`.
    pub fn psi_rate(&self) -> f64 {
        1.0 / (self.mght_scale * self.mght_scale)
    }

    /// Wishart degrees of freedom for `Σ⁻¹` in dimension `d`.
    pub fn wishart_df(&self, d: usize) -> f64 {
        self.mght_df + d as f64 - 1.0
    }
}

/// Random-effects covariance with its MGH-t auxiliaries.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    pub sigma: DMatrix<f64>,
    pub psi: Vec<f64>,
}

impl CovarianceState {
    pub fn new(sigma: DMatrix<f64>, psi: Vec<f64>) -> Result<Self> {
        let s = Self { sigma, psi };
        s.validate()?;
        Ok(s)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            sigma: DMatrix::identity(d, d),
            psi: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.psi.len();
        if self.sigma.nrows() != d || self.sigma.ncols() != d {
            return Err(Error::domain("covariance and auxiliary dimensions differ"));
        }
        if self.psi.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::domain("auxiliary scales must be positive"));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (self.sigma[(i, j)], self.sigma[(j, i)]);
                if (a - b).abs() > 1e-10 * (a.abs() + b.abs()).max(1.0) {
                    return Err(Error::domain("covariance matrix is not symmetric"));
                }
            }
        }
        cholesky(&self.sigma).map(|_| ())
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.sigma)
    }
}

fn gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn log_prior_fixed_effects(beta: &[f64], config: &PriorConfig) -> f64 {
    let v = config.beta_variance;
    beta.iter()
        .map(|b| -0.5 * (LN_2PI + v.ln()) - b * b / (2.0 * v))
        .sum()
}

/// Half-t log-density, twice the symmetric t density on `(0, ∞)`.
pub(crate) fn half_t_log_pdf(x: f64, scale: f64, df: f64) -> f64 {
    let z = x / scale;
    std::f64::consts::LN_2 - scale.ln() + ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - 0.5 * (df + 1.0) * (z * z / df).ln_1p()
}

pub fn log_prior_scale(sigma: f64, config: &PriorConfig) -> Result<f64> {
    require_positive("sigma", sigma)?;
    Ok(half_t_log_pdf(sigma, config.sigma_halft_scale, config.sigma_halft_df))
}

pub fn log_prior_delta(delta: f64, config: &PriorConfig) -> Result<f64> {
    require_positive("delta", delta)?;
    Ok(gamma_log_pdf(delta, config.delta_gamma_shape, config.delta_gamma_rate))
}

/// Joint log-density of `ε ~ Exp(rate)` and `ν | ε ~ Gamma(shape, ε)`.
pub fn log_prior_nu(nu: f64, epsilon: f64, config: &PriorConfig) -> Result<f64> {
    require_positive("nu", nu)?;
    require_positive("epsilon", epsilon)?;
    let r = config.nu_exp_rate;
    Ok(r.ln() - r * epsilon + gamma_log_pdf(nu, config.nu_gamma_shape, epsilon))
}

/// Wishart log-density of `x` with `df` degrees of freedom and *inverse*
/// scale matrix `inv_scale`.
pub(crate) fn wishart_log_pdf(x: &DMatrix<f64>, df: f64, inv_scale: &DMatrix<f64>) -> Result<f64> {
    let d = x.nrows() as f64;
    let ln_det_x = log_det_chol(&cholesky(x)?);
    let ln_det_inv_scale = log_det_chol(&cholesky(inv_scale)?);
    let trace = (inv_scale * x).trace();
    let ln_mvgamma = d * (d - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=x.nrows())
            .map(|j| ln_gamma(0.5 * df + 0.5 * (1.0 - j as f64)))
            .sum::<f64>();
    Ok(0.5 * (df - d - 1.0) * ln_det_x - 0.5 * trace - 0.5 * df * d * std::f64::consts::LN_2
        + 0.5 * df * ln_det_inv_scale
        - ln_mvgamma)
}

/// Gamma log-densities of the auxiliaries plus the Wishart log-density of
/// `Σ⁻¹` with inverse scale `2ν·Ψ` (`4Ψ` at the default `ν = 2`).
pub fn log_prior_covariance(state: &CovarianceState, config: &PriorConfig) -> Result<f64> {
    state.validate()?;
    let d = state.dim();
    let rate = config.psi_rate();
    let psi_terms: f64 = state.psi.iter().map(|&p| gamma_log_pdf(p, 0.5, rate)).sum();
    let precision = state.precision()?;
    let inv_scale = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        d,
        state.psi.iter().map(|p| 2.0 * config.mght_df * p),
    ));
    Ok(psi_terms + wishart_log_pdf(&precision, config.wishart_df(d), &inv_scale)?)
}

/// Draws `(Ψ, Σ)` from the MGH-t prior hierarchy.
pub fn sample_covariance_prior<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    config: &PriorConfig,
) -> Result<CovarianceState> {
    let gamma = Gamma::new(0.5, 1.0 / config.psi_rate()).expect("valid gamma");
    let psi: Vec<f64> = (0..d).map(|_| gamma.sample(rng)).collect();
    let scale = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        d,
        psi.iter().map(|p| 1.0 / (2.0 * config.mght_df * p)),
    ));
    let precision = sample_wishart(rng, config.wishart_df(d), &scale)?;
    Ok(CovarianceState {
        sigma: spd_inverse(&precision)?,
        psi,
    })
}
