//! Model specification, design matrices, likelihoods and the joint log-posterior.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::distributions::{
    beta_binomial_log_pmf_unchecked, binomial_log_kernel, logit_mixture_log_pmf_with, LatentFamily,
    LatentTParams,
};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_chol};
use crate::math::{ln_choose, sigmoid};
use crate::priors::{
    log_prior_covariance, log_prior_delta, log_prior_fixed_effects, log_prior_nu, log_prior_scale,
    CovarianceState, PriorConfig,
};
use crate::quadrature::LatentQuadrature;

/// Success probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-12;
/// Logit of `1 − P_CLAMP`; latent draws are confined to `±XI_CLAMP`.
pub const XI_CLAMP: f64 = 27.631_021_115_871_036;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Binomial,
    BetaBinomial,
    BinomialLogitNormal,
    BinomialLogitT,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Binomial,
        Family::BetaBinomial,
        Family::BinomialLogitNormal,
        Family::BinomialLogitT,
    ];

    /// Latent law for the logit-mixture families.
    pub fn latent(self) -> Option<LatentFamily> {
        match self {
            Family::BinomialLogitNormal => Some(LatentFamily::Normal),
            Family::BinomialLogitT => Some(LatentFamily::StudentT),
            _ => None,
        }
    }

    pub fn is_logit_mixture(self) -> bool {
        self.latent().is_some()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Binomial => "binomial",
            Family::BetaBinomial => "beta_binomial",
            Family::BinomialLogitNormal => "binomial_logit_normal",
            Family::BinomialLogitT => "binomial_logit_t",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == key)
            .ok_or_else(|| Error::Config(format!("unknown family `{s}`")))
    }
}

/// One column of a design matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Intercept,
    Covariate(String),
    /// Product of two or more covariates, written `a:b`.
    Interaction(Vec<String>),
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Intercept => "intercept".to_string(),
            Term::Covariate(c) => c.clone(),
            Term::Interaction(parts) => parts.join(":"),
        }
    }

    fn covariates(&self) -> Vec<&str> {
        match self {
            Term::Intercept => Vec::new(),
            Term::Covariate(c) => vec![c.as_str()],
            Term::Interaction(parts) => parts.iter().map(String::as_str).collect(),
        }
    }

    /// Evaluates the term given a covariate lookup.
    pub fn evaluate(&self, lookup: impl Fn(&str) -> Option<f64>) -> Result<f64> {
        self.covariates().into_iter().try_fold(1.0, |acc, c| {
            lookup(c)
                .map(|v| acc * v)
                .ok_or_else(|| Error::domain(format!("covariate `{c}` not available")))
        })
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Config("empty model term".into()));
        }
        if s == "1" || s.eq_ignore_ascii_case("intercept") {
            return Ok(Term::Intercept);
        }
        if s.contains(':') {
            let parts: Vec<String> = s.split(':').map(|p| p.trim().to_string()).collect();
            if parts.iter().any(String::is_empty) {
                return Err(Error::Config(format!("malformed interaction `{s}`")));
            }
            return Ok(Term::Interaction(parts));
        }
        Ok(Term::Covariate(s.to_string()))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub fixed_terms: Vec<Term>,
    pub random_terms: Vec<Term>,
    pub priors: PriorConfig,
    /// Subtract the sample mean from every non-intercept fixed-effect column.
    pub center_covariates: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            family: Family::BinomialLogitT,
            fixed_terms: vec![Term::Intercept],
            random_terms: vec![Term::Intercept],
            priors: PriorConfig::default(),
            center_covariates: false,
        }
    }
}

impl ModelSpec {
    pub fn new(family: Family, fixed: &[&str], random: &[&str]) -> Result<Self> {
        Ok(Self {
            family,
            fixed_terms: fixed.iter().map(|t| t.parse()).collect::<Result<_>>()?,
            random_terms: random.iter().map(|t| t.parse()).collect::<Result<_>>()?,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        if self.fixed_terms.is_empty() {
            return Err(Error::Config("at least one fixed-effect term is required".into()));
        }
        for terms in [&self.fixed_terms, &self.random_terms] {
            let mut names: Vec<String> = terms.iter().map(Term::name).collect();
            names.sort();
            if names.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Config("duplicate model term".into()));
            }
        }
        Ok(())
    }

    pub fn fixed_names(&self) -> Vec<String> {
        self.fixed_terms.iter().map(Term::name).collect()
    }

    pub fn random_names(&self) -> Vec<String> {
        self.random_terms.iter().map(Term::name).collect()
    }
}

/// One bounded-count measurement. Covariate values are aligned with
/// [`Dataset::covariate_names`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub cluster_id: String,
    pub y: u32,
    pub m: u32,
    pub covariates: Vec<f64>,
}

/// Ordering of cluster identifiers: numeric ids compare numerically and
/// precede non-numeric ones, which compare lexically.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub covariate_names: Vec<String>,
    pub records: Vec<ObservationRecord>,
    /// File column order, a permutation of `id`, `y`, `m` and the covariates.
    pub columns: Vec<String>,
}

impl Dataset {
    /// Validates records and sorts them stably by cluster id.
    pub fn new(covariate_names: Vec<String>, mut records: Vec<ObservationRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.y > r.m {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("y = {} exceeds m = {}", r.y, r.m),
                });
            }
            if r.covariates.len() != covariate_names.len() {
                return Err(Error::Parse { row: i + 1, message: "covariate count mismatch".into() });
            }
            if r.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse { row: i + 1, message: "non-finite covariate".into() });
            }
        }
        records.sort_by(|a, b| compare_ids(&a.cluster_id, &b.cluster_id));
        let columns = ["id", "y", "m"]
            .into_iter()
            .map(String::from)
            .chain(covariate_names.iter().cloned())
            .collect();
        Ok(Self { covariate_names, records, columns })
    }

    /// Replaces the column order used when writing the dataset back out.
    pub fn with_columns(mut self, columns: Vec<String>) -> Result<Self> {
        let mut given = columns.clone();
        let mut expected = self.columns.clone();
        given.sort();
        expected.sort();
        if given != expected {
            return Err(Error::Config(format!("column order {columns:?} does not match the dataset")));
        }
        self.columns = columns;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn covariate(&self, record: &ObservationRecord, name: &str) -> Option<f64> {
        self.covariate_index(name).map(|i| record.covariates[i])
    }
}

/// Dense design built once per fit.
#[derive(Debug, Clone)]
pub struct Design {
    pub family: Family,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    /// Column means removed from the fixed-effect columns (zero when not centering).
    pub centers: Vec<f64>,
    pub y: Vec<u32>,
    pub m: Vec<u32>,
    pub cluster: Vec<usize>,
    pub cluster_ids: Vec<String>,
    pub cluster_obs: Vec<Vec<usize>>,
    pub ln_choose: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    fixed_terms: Vec<Term>,
    random_terms: Vec<Term>,
    covariate_names: Vec<String>,
    cluster_index: HashMap<String, usize>,
}

fn resolve_terms(dataset: &Dataset, terms: &[Term]) -> Result<()> {
    for t in terms {
        for c in t.covariates() {
            if dataset.covariate_index(c).is_none() {
                return Err(Error::Config(format!("model term `{t}` uses unknown covariate `{c}`")));
            }
        }
    }
    Ok(())
}

impl Design {
    pub fn new(dataset: &Dataset, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        resolve_terms(dataset, &spec.fixed_terms)?;
        resolve_terms(dataset, &spec.random_terms)?;
        let n = dataset.len();
        let p = spec.fixed_terms.len();
        let d = spec.random_terms.len();

        let mut x = Vec::with_capacity(n * p);
        let mut z = Vec::with_capacity(n * d);
        let mut cluster = Vec::with_capacity(n);
        let mut cluster_ids: Vec<String> = Vec::new();
        let mut cluster_index = HashMap::new();
        for r in &dataset.records {
            let lookup = |c: &str| dataset.covariate(r, c);
            for t in &spec.fixed_terms {
                x.push(t.evaluate(lookup)?);
            }
            for t in &spec.random_terms {
                z.push(t.evaluate(lookup)?);
            }
            let c = *cluster_index.entry(r.cluster_id.clone()).or_insert_with(|| {
                cluster_ids.push(r.cluster_id.clone());
                cluster_ids.len() - 1
            });
            cluster.push(c);
        }
        let mut centers = vec![0.0; p];
        if spec.center_covariates && n > 0 {
            for (j, t) in spec.fixed_terms.iter().enumerate() {
                if *t != Term::Intercept {
                    centers[j] = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
                    for i in 0..n {
                        x[i * p + j] -= centers[j];
                    }
                }
            }
        }
        let mut cluster_obs = vec![Vec::new(); cluster_ids.len()];
        for (i, &c) in cluster.iter().enumerate() {
            cluster_obs[c].push(i);
        }
        let y: Vec<u32> = dataset.records.iter().map(|r| r.y).collect();
        let m: Vec<u32> = dataset.records.iter().map(|r| r.m).collect();
        let ln_choose = y.iter().zip(&m).map(|(&y, &m)| ln_choose(m, y)).collect();
        Ok(Self {
            family: spec.family,
            fixed_names: spec.fixed_names(),
            random_names: spec.random_names(),
            centers,
            y,
            m,
            cluster,
            cluster_ids,
            cluster_obs,
            ln_choose,
            x,
            z,
            fixed_terms: spec.fixed_terms.clone(),
            random_terms: spec.random_terms.clone(),
            covariate_names: dataset.covariate_names.clone(),
            cluster_index,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn n_random(&self) -> usize {
        self.random_names.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_ids.len()
    }

    #[inline]
    pub fn x_row(&self, i: usize) -> &[f64] {
        let p = self.n_fixed();
        &self.x[i * p..(i + 1) * p]
    }

    #[inline]
    pub fn z_row(&self, i: usize) -> &[f64] {
        let d = self.n_random();
        &self.z[i * d..(i + 1) * d]
    }

    #[inline]
    pub fn fixed_part(&self, i: usize, beta: &[f64]) -> f64 {
        dot(self.x_row(i), beta)
    }

    #[inline]
    pub fn random_part(&self, i: usize, u: &[Vec<f64>]) -> f64 {
        if self.n_random() == 0 {
            0.0
        } else {
            dot(self.z_row(i), &u[self.cluster[i]])
        }
    }

    /// `η = x'β + z'u` for observation `i`.
    #[inline]
    pub fn eta(&self, i: usize, state: &ParameterState) -> f64 {
        self.fixed_part(i, &state.beta) + self.random_part(i, &state.u)
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.cluster_index.get(id).copied()
    }

    /// Fixed-effect row for arbitrary covariate values, with centering applied.
    pub fn fixed_row_for(&self, lookup: impl Fn(&str) -> Option<f64>) -> Result<Vec<f64>> {
        self.fixed_terms
            .iter()
            .zip(&self.centers)
            .map(|(t, c)| t.evaluate(&lookup).map(|v| v - c))
            .collect()
    }

    /// Linear predictor for a record that may not be part of the design.
    pub fn linear_predictor(&self, record: &ObservationRecord, state: &ParameterState) -> Result<f64> {
        let lookup = |c: &str| {
            self.covariate_names
                .iter()
                .position(|n| n == c)
                .and_then(|i| record.covariates.get(i).copied())
        };
        let x = self.fixed_row_for(lookup)?;
        if x.len() != state.beta.len() {
            return Err(Error::domain("beta length does not match the fixed-effect design"));
        }
        let mut eta = dot(&x, &state.beta);
        if self.n_random() > 0 {
            let c = self
                .cluster_of(&record.cluster_id)
                .ok_or_else(|| Error::domain(format!("unknown cluster `{}`", record.cluster_id)))?;
            let z: Vec<f64> = self
                .random_terms
                .iter()
                .map(|t| t.evaluate(lookup))
                .collect::<Result<_>>()?;
            eta += dot(&z, &state.u[c]);
        }
        Ok(eta)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub beta: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub covariance: CovarianceState,
    pub sigma: f64,
    pub nu: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub xi: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl ParameterState {
    /// A neutral state of the right shape: zero coefficients, identity
    /// covariance, `σ = 1`, `ν = 10`, `δ = 10`, `ξ = 0`, `λ = 1`.
    pub fn zeros(design: &Design) -> Self {
        let d = design.n_random();
        Self {
            beta: vec![0.0; design.n_fixed()],
            u: vec![vec![0.0; d]; design.n_clusters()],
            covariance: CovarianceState::identity(d),
            sigma: 1.0,
            nu: 10.0,
            epsilon: 0.2,
            delta: 10.0,
            xi: vec![0.0; design.n_obs()],
            lambda: vec![1.0; design.n_obs()],
        }
    }

    pub fn validate(&self, design: &Design) -> Result<()> {
        let d = design.n_random();
        if self.beta.len() != design.n_fixed()
            || self.u.len() != design.n_clusters()
            || self.u.iter().any(|u| u.len() != d)
            || self.covariance.dim() != d
            || self.xi.len() != design.n_obs()
            || self.lambda.len() != design.n_obs()
        {
            return Err(Error::domain("parameter dimensions do not match the design"));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("nu", self.nu),
            ("epsilon", self.epsilon),
            ("delta", self.delta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::domain("lambda entries must be positive"));
        }
        if d > 0 {
            self.covariance.validate()?;
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// Binomial log-pmf at `p = logit⁻¹(x)` with the probability clamp applied.
#[inline]
pub(crate) fn binomial_logit_log_pmf(k: u32, m: u32, ln_coef: f64, x: f64) -> f64 {
    binomial_log_kernel(k, m, ln_coef, x.clamp(-XI_CLAMP, XI_CLAMP))
}

#[inline]
pub(crate) fn beta_binomial_logit_log_pmf(k: u32, m: u32, eta: f64, delta: f64) -> f64 {
    let p = clamp_p(sigmoid(eta));
    beta_binomial_log_pmf_unchecked(k, m, p * delta, (1.0 - p) * delta)
}

/// Conditional log-likelihood of observation `i`: given `(β, u)` for the
/// binomial and beta-binomial families, given the latent `ξ` for the
/// logit-mixture families.
pub fn observation_log_likelihood(design: &Design, i: usize, state: &ParameterState) -> Result<f64> {
    let (k, m, c) = (design.y[i], design.m[i], design.ln_choose[i]);
    let v = match design.family {
        Family::Binomial => binomial_logit_log_pmf(k, m, c, design.eta(i, state)),
        Family::BetaBinomial => {
            if !(state.delta > 0.0 && state.delta.is_finite()) {
                return Err(Error::domain("delta must be positive"));
            }
            beta_binomial_logit_log_pmf(k, m, design.eta(i, state), state.delta)
        }
        Family::BinomialLogitNormal | Family::BinomialLogitT => {
            binomial_logit_log_pmf(k, m, c, state.xi[i])
        }
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("non-finite log-likelihood at observation {i}")))
    }
}

/// Log-likelihood of `y` out of `m` with any latent `ξ` integrated out.
/// For the binomial and beta-binomial families this is the conditional
/// likelihood given `η`.
pub fn marginal_log_likelihood(
    y: u32,
    m: u32,
    eta: f64,
    sigma: f64,
    nu: f64,
    delta: f64,
    family: Family,
) -> Result<f64> {
    marginal_log_likelihood_with(y, m, eta, sigma, nu, delta, family, &LatentQuadrature::default())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn marginal_log_likelihood_with(
    y: u32,
    m: u32,
    eta: f64,
    sigma: f64,
    nu: f64,
    delta: f64,
    family: Family,
    settings: &LatentQuadrature,
) -> Result<f64> {
    if y > m {
        return Err(Error::domain(format!("count {y} exceeds trials {m}")));
    }
    match family.latent() {
        None if family == Family::BetaBinomial => {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(Error::domain("delta must be positive"));
            }
            Ok(beta_binomial_logit_log_pmf(y, m, eta, delta))
        }
        None => Ok(binomial_logit_log_pmf(y, m, ln_choose(m, y), eta)),
        Some(latent) => {
            let params = LatentTParams::new(eta, sigma, nu)?;
            logit_mixture_log_pmf_with(y, m, &params, latent, settings)
        }
    }
}

/// `ln N(x; μ, s²)`.
#[inline]
pub(crate) fn normal_log_pdf(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - (x - mu) * (x - mu) / (2.0 * var)
}

#[inline]
pub(crate) fn gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// `ln N_d(u; 0, Σ)` for every cluster, given a Cholesky factor of `Σ`.
fn random_effect_log_densities(state: &ParameterState) -> Result<Vec<f64>> {
    let d = state.covariance.dim();
    if d == 0 {
        return Ok(Vec::new());
    }
    let chol = cholesky(&state.covariance.sigma)?;
    let ln_det = log_det_chol(&chol);
    Ok(state
        .u
        .iter()
        .map(|u| {
            let v = DVector::from_column_slice(u);
            let quad = v.dot(&chol.solve(&v));
            -0.5 * (d as f64 * LN_2PI + ln_det + quad)
        })
        .collect())
}

/// Joint log-posterior (up to the evidence): conditional observation
/// log-likelihoods, latent-variable log-densities, random-effect
/// log-densities and all log-priors. Terms are summed in ascending order of
/// value, so the result does not depend on record order.
pub fn log_posterior(design: &Design, state: &ParameterState, spec: &ModelSpec) -> Result<f64> {
    state.validate(design)?;
    let family = design.family;
    let mut terms = Vec::with_capacity(3 * design.n_obs() + design.n_clusters() + 8);
    for i in 0..design.n_obs() {
        terms.push(observation_log_likelihood(design, i, state)?);
        if family.is_logit_mixture() {
            let eta = design.eta(i, state);
            let lambda = if family == Family::BinomialLogitT { state.lambda[i] } else { 1.0 };
            terms.push(normal_log_pdf(state.xi[i], eta, state.sigma * state.sigma / lambda));
            if family == Family::BinomialLogitT {
                terms.push(gamma_log_pdf(lambda, 0.5 * state.nu, 0.5 * state.nu));
            }
        }
    }
    terms.extend(random_effect_log_densities(state)?);
    let priors = &spec.priors;
    terms.push(log_prior_fixed_effects(&state.beta, priors));
    if family.is_logit_mixture() {
        terms.push(log_prior_scale(state.sigma, priors)?);
    }
    if family == Family::BinomialLogitT {
        terms.push(log_prior_nu(state.nu, state.epsilon, priors)?);
    }
    if family == Family::BetaBinomial {
        terms.push(log_prior_delta(state.delta, priors)?);
    }
    if design.n_random() > 0 {
        terms.push(log_prior_covariance(&state.covariance, priors)?);
    }
    terms.sort_by(f64::total_cmp);
    let total: f64 = terms.iter().sum();
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::Numerical("non-finite log-posterior".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{beta_binomial_log_pmf, binomial_log_pmf, BetaBinomialParams};
    use crate::quadrature::{integrate, Tolerance};
    use nalgebra::DMatrix;

    fn toy_dataset() -> Dataset {
        let names = vec!["time".to_string(), "group".to_string(), "age".to_string()];
        let rec = |id: &str, y, m, t: f64, g: f64, a: f64| ObservationRecord {
            cluster_id: id.into(),
            y,
            m,
            covariates: vec![t, g, a],
        };
        Dataset::new(
            names,
            vec![
                rec("10", 3, 10, 0.0, 1.0, 55.0),
                rec("2", 5, 10, 0.0, 0.0, 60.0),
                rec("2", 6, 10, 1.0, 0.0, 60.0),
                rec("10", 9, 10, 1.0, 1.0, 55.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn term_parsing() {
        assert_eq!("1".parse::<Term>().unwrap(), Term::Intercept);
        assert_eq!("Intercept".parse::<Term>().unwrap(), Term::Intercept);
        assert_eq!(
            "group:time".parse::<Term>().unwrap(),
            Term::Interaction(vec!["group".into(), "time".into()])
        );
        assert!("a:".parse::<Term>().is_err());
        assert_eq!("beta-binomial".parse::<Family>().unwrap(), Family::BetaBinomial);
        assert!("poisson".parse::<Family>().is_err());
    }

    #[test]
    fn dataset_sorts_ids_naturally_and_stably() {
        let ds = toy_dataset();
        let ids: Vec<_> = ds.records.iter().map(|r| r.cluster_id.as_str()).collect();
        assert_eq!(ids, ["2", "2", "10", "10"]);
        assert_eq!(ds.records[0].y, 5);
        assert_eq!(ds.records[3].y, 9);
        assert_eq!(compare_ids("a", "3"), Ordering::Greater);
    }

    #[test]
    fn linear_predictor_examples() {
        let ds = toy_dataset();
        let spec = ModelSpec::new(Family::Binomial, &["1", "time"], &["1"]).unwrap();
        let design = Design::new(&ds, &spec).unwrap();
        let mut state = ParameterState::zeros(&design);
        assert_eq!(design.eta(0, &state), 0.0);
        state.beta = vec![1.5, -0.05];
        let r = ObservationRecord { cluster_id: "2".into(), y: 0, m: 1, covariates: vec![3.0, 0.0, 0.0] };
        assert!((design.linear_predictor(&r, &state).unwrap() - 1.35).abs() < 1e-14);
        let unknown = ObservationRecord { cluster_id: "99".into(), ..r };
        assert!(design.linear_predictor(&unknown, &state).is_err());
    }

    #[test]
    fn adherence_row_prediction() {
        let ds = toy_dataset();
        let spec = ModelSpec::new(
            Family::BinomialLogitT,
            &["1", "group", "time", "group:time", "age"],
            &["1", "time"],
        )
        .unwrap();
        let design = Design::new(&ds, &spec).unwrap();
        let mut state = ParameterState::zeros(&design);
        state.beta = vec![2.01, 0.55, -0.05, 0.04, 0.02];
        let r = ObservationRecord { cluster_id: "10".into(), y: 0, m: 30, covariates: vec![4.0, 1.0, 60.0] };
        assert!((design.linear_predictor(&r, &state).unwrap() - 3.72).abs() < 1e-12);
    }

    #[test]
    fn unknown_covariate_is_config_error() {
        let spec = ModelSpec::new(Family::Binomial, &["1", "dose"], &[]).unwrap();
        assert!(matches!(Design::new(&toy_dataset(), &spec), Err(Error::Config(_))));
    }

    #[test]
    fn observation_likelihood_delegates() {
        let names = vec!["time".to_string()];
        let ds = Dataset::new(
            names,
            vec![
                ObservationRecord { cluster_id: "1".into(), y: 5, m: 10, covariates: vec![0.0] },
                ObservationRecord { cluster_id: "1".into(), y: 1, m: 1, covariates: vec![0.0] },
            ],
        )
        .unwrap();
        let mut spec = ModelSpec::new(Family::Binomial, &["1"], &[]).unwrap();
        let design = Design::new(&ds, &spec).unwrap();
        let mut state = ParameterState::zeros(&design);
        let v = observation_log_likelihood(&design, 0, &state).unwrap();
        assert!((v - binomial_log_pmf(5, 10, 0.5).unwrap()).abs() < 1e-13);

        spec.family = Family::BinomialLogitT;
        let design = Design::new(&ds, &spec).unwrap();
        state.xi[0] = 0.8;
        let v = observation_log_likelihood(&design, 0, &state).unwrap();
        assert!((v - binomial_log_pmf(5, 10, sigmoid(0.8)).unwrap()).abs() < 1e-12);

        spec.family = Family::BetaBinomial;
        let design = Design::new(&ds, &spec).unwrap();
        state.beta = vec![0.4];
        state.delta = 3.0;
        let v = observation_log_likelihood(&design, 1, &state).unwrap();
        assert!((v - sigmoid(0.4).ln()).abs() < 1e-12);
        let bb = beta_binomial_log_pmf(5, 10, &BetaBinomialParams::new(sigmoid(0.4), 3.0).unwrap()).unwrap();
        assert!((observation_log_likelihood(&design, 0, &state).unwrap() - bb).abs() < 1e-12);
    }

    #[test]
    fn extreme_latent_values_are_clamped() {
        let ln_c = ln_choose(10, 3);
        let v = binomial_logit_log_pmf(3, 10, ln_c, 500.0);
        let at_clamp = binomial_log_pmf(3, 10, 1.0 - P_CLAMP).unwrap();
        assert!(v.is_finite());
        assert!((v - at_clamp).abs() < 1e-6 * at_clamp.abs());
    }

    #[test]
    fn scale_mixture_recovers_t_density() {
        let (eta, sigma) = (0.3, 1.7);
        for &nu in &[0.8, 2.5, 7.0] {
            for &xi in &[-4.0, 0.0, 1.1, 9.0] {
                let mix = integrate(
                    |u: f64| {
                        let l = u / (1.0 - u);
                        (normal_log_pdf(xi, eta, sigma * sigma / l) + gamma_log_pdf(l, 0.5 * nu, 0.5 * nu))
                            .exp()
                            / ((1.0 - u) * (1.0 - u))
                    },
                    1e-300,
                    1.0 - 1e-15,
                    &[0.1, 0.5, 0.9, 0.99],
                    Tolerance { relative: 1e-12, absolute: 0.0, max_panels: 20_000 },
                )
                .unwrap()
                .value;
                let z = (xi - eta) / sigma;
                let t = (ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu)
                    - 0.5 * (nu * std::f64::consts::PI).ln()
                    - sigma.ln()
                    - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p())
                .exp();
                assert!((mix - t).abs() < 1e-8, "nu {nu} xi {xi}: {mix} vs {t}");
            }
        }
    }

    #[test]
    fn marginal_normal_small_sigma_reduces_to_binomial() {
        let a = marginal_log_likelihood(7, 20, 0.4, 1e-6, 10.0, 1.0, Family::BinomialLogitNormal).unwrap();
        let b = binomial_log_pmf(7, 20, sigmoid(0.4)).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn log_posterior_empty_dataset_is_priors_only() {
        let ds = Dataset::new(vec![], vec![]).unwrap();
        let spec = ModelSpec::new(Family::Binomial, &["1"], &[]).unwrap();
        let design = Design::new(&ds, &spec).unwrap();
        let mut state = ParameterState::zeros(&design);
        state.beta = vec![0.7];
        let lp = log_posterior(&design, &state, &spec).unwrap();
        assert_eq!(lp, log_prior_fixed_effects(&[0.7], &spec.priors));
    }

    #[test]
    fn log_posterior_single_observation_by_hand() {
        let ds = Dataset::new(
            vec!["time".into()],
            vec![ObservationRecord { cluster_id: "a".into(), y: 4, m: 9, covariates: vec![2.0] }],
        )
        .unwrap();
        let spec = ModelSpec::new(Family::BinomialLogitT, &["1", "time"], &["1"]).unwrap();
        let design = Design::new(&ds, &spec).unwrap();
        let state = ParameterState {
            beta: vec![0.2, -0.1],
            u: vec![vec![0.3]],
            covariance: CovarianceState::new(DMatrix::from_element(1, 1, 0.5), vec![2.0]).unwrap(),
            sigma: 1.3,
            nu: 4.0,
            epsilon: 0.6,
            delta: 10.0,
            xi: vec![-0.4],
            lambda: vec![0.8],
        };
        let eta = 0.2 - 0.2 + 0.3;
        let pr = &spec.priors;
        let hand = binomial_log_pmf(4, 9, sigmoid(-0.4)).unwrap()
            + normal_log_pdf(-0.4, eta, 1.3 * 1.3 / 0.8)
            + gamma_log_pdf(0.8, 2.0, 2.0)
            + normal_log_pdf(0.3, 0.0, 0.5)
            + log_prior_fixed_effects(&state.beta, pr)
            + log_prior_scale(1.3, pr).unwrap()
            + log_prior_nu(4.0, 0.6, pr).unwrap()
            + log_prior_covariance(&state.covariance, pr).unwrap();
        let lp = log_posterior(&design, &state, &spec).unwrap();
        assert!((lp - hand).abs() < 1e-9 * hand.abs(), "{lp} vs {hand}");
    }

    #[test]
    fn log_posterior_is_order_invariant() {
        let ds = toy_dataset();
        let mut rev = ds.clone();
        rev.records.reverse();
        let spec = ModelSpec::new(Family::BinomialLogitNormal, &["1", "time"], &["1"]).unwrap();
        let lp = |ds: &Dataset| {
            let design = Design::new(ds, &spec).unwrap();
            let mut state = ParameterState::zeros(&design);
            state.beta = vec![0.1, 0.2];
            for i in 0..design.n_obs() {
                state.xi[i] = 0.1 * design.y[i] as f64 - 0.3;
            }
            for (c, id) in design.cluster_ids.iter().enumerate() {
                state.u[c][0] = if id == "2" { 0.25 } else { -0.5 };
            }
            log_posterior(&design, &state, &spec).unwrap()
        };
        assert_eq!(lp(&ds).to_bits(), lp(&rev).to_bits());
    }
}
