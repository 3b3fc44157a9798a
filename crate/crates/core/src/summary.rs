//! Posterior point estimates, HPD intervals and trajectory predictions.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{waic, WaicResult};
use crate::distributions::{mixture_mean, LatentTParams};
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::model::{dot, Family, Term};
use crate::sampler::{format_float, gelman_rubin, PosteriorDraws};

pub const SCHEMA_VERSION: u32 = 1;

/// Shortest window of sorted samples containing `⌈prob·n⌉` points; ties go
/// to the smallest lower endpoint.
pub fn hpd_interval(samples: &[f64], prob: f64) -> Result<(f64, f64)> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::domain(format!("HPD probability must lie in (0, 1), got {prob}")));
    }
    if samples.len() < 20 {
        return Err(Error::domain("HPD interval needs at least 20 samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("HPD samples must be finite"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((prob * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut best = 0;
    let mut width = f64::INFINITY;
    for start in 0..=n - k {
        let w = sorted[start + k - 1] - sorted[start];
        if w < width {
            width = w;
            best = start;
        }
    }
    Ok((sorted[best], sorted[best + k - 1]))
}

/// Lower-middle order statistic.
pub fn median_lower(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("median of an empty sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(sorted.len() - 1) / 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub estimate: f64,
    pub hpd_low: f64,
    pub hpd_high: f64,
    /// Absent with a single chain or zero within-chain variance.
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicSummary {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    /// `−2·waic`; lower is better.
    pub deviance: f64,
}

impl From<WaicResult> for WaicSummary {
    fn from(w: WaicResult) -> Self {
        Self { waic: w.waic, lppd: w.lppd, p_waic: w.p_waic, deviance: w.deviance() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub schema_version: u32,
    pub family: Family,
    pub n_chains: usize,
    pub n_draws: usize,
    pub seeds: Vec<u64>,
    pub parameters: Vec<ParameterSummary>,
    pub waic: Option<WaicSummary>,
    pub acceptance: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl FitSummary {
    pub fn get(&self, parameter: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.parameter == parameter)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["parameter", "estimate", "hpd_low", "hpd_high", "rhat"])
            .map_err(crate::sampler::csv_error)?;
        for p in &self.parameters {
            w.write_record([
                p.parameter.clone(),
                format_float(p.estimate),
                format_float(p.hpd_low),
                format_float(p.hpd_high),
                p.rhat.map(format_float).unwrap_or_default(),
            ])
            .map_err(crate::sampler::csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn summarize_samples(name: &str, pooled: &[f64], chains: &[Vec<f64>]) -> Result<ParameterSummary> {
    let (hpd_low, hpd_high) = hpd_interval(pooled, 0.95)?;
    Ok(ParameterSummary {
        parameter: name.to_string(),
        estimate: median_lower(pooled)?,
        hpd_low,
        hpd_high,
        rhat: gelman_rubin(chains).ok(),
    })
}

/// Median, 95% HPD and R-hat for every parameter, plus WAIC when the
/// log-likelihood matrix is available.
pub fn posterior_summary(draws: &PosteriorDraws) -> Result<FitSummary> {
    let parameters = draws
        .parameter_names
        .iter()
        .map(|name| {
            let pooled = draws.column(name).expect("known parameter");
            let chains = draws.chain_columns(name).expect("known parameter");
            summarize_samples(name, &pooled, &chains)
        })
        .collect::<Result<_>>()?;
    let waic = match &draws.loglik {
        Some(ll) => Some(waic(ll)?.into()),
        None => None,
    };
    Ok(FitSummary {
        schema_version: SCHEMA_VERSION,
        family: draws.family,
        n_chains: draws.chains.len(),
        n_draws: draws.n_draws(),
        seeds: draws.seeds(),
        parameters,
        waic,
        acceptance: draws.acceptance_rates(),
        warnings: draws.warnings.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Mean,
    PseudoMedian,
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "mean" => Ok(Target::Mean),
            "pseudo_median" => Ok(Target::PseudoMedian),
            _ => Err(Error::Config(format!("unknown prediction target `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryRequest {
    pub times: Vec<f64>,
    pub group: u8,
    /// Values of the remaining covariates (e.g. mean age).
    pub covariates: BTreeMap<String, f64>,
    pub m_ref: u32,
    pub target: Target,
    pub time_name: String,
    pub group_name: String,
}

impl Default for TrajectoryRequest {
    fn default() -> Self {
        Self {
            times: (0..=10).map(f64::from).collect(),
            group: 0,
            covariates: BTreeMap::new(),
            m_ref: 30,
            target: Target::Mean,
            time_name: "time".into(),
            group_name: "group".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub estimate: f64,
    pub hpd_low: f64,
    pub hpd_high: f64,
}

/// Population-level (`u = 0`) trajectory of the mean or pseudo-median
/// proportion, summarized across draws by median and 95% HPD.
pub fn predict_trajectory(draws: &PosteriorDraws, request: &TrajectoryRequest) -> Result<Vec<TrajectoryPoint>> {
    if request.target == Target::PseudoMedian && draws.family == Family::BetaBinomial {
        return Err(Error::UnsupportedTarget(
            "the beta-binomial pseudo-median has no closed form".into(),
        ));
    }
    if request.m_ref == 0 {
        return Err(Error::Config("m_ref must be positive".into()));
    }
    let terms: Vec<Term> = draws.fixed_names.iter().map(|n| n.parse()).collect::<Result<_>>()?;
    let n = draws.n_draws();
    let params: Vec<_> = (0..n).map(|k| draws.draw_params(k)).collect();
    request
        .times
        .iter()
        .map(|&t| {
            let lookup = |c: &str| {
                if c == request.time_name {
                    Some(t)
                } else if c == request.group_name {
                    Some(request.group as f64)
                } else {
                    request.covariates.get(c).copied()
                }
            };
            let x: Vec<f64> = terms
                .iter()
                .zip(&draws.centers)
                .map(|(term, c)| {
                    term.evaluate(lookup)
                        .map(|v| v - c)
                        .map_err(|e| Error::Config(format!("trajectory request: {e}")))
                })
                .collect::<Result<_>>()?;
            let values: Vec<f64> = params
                .par_iter()
                .map(|p| {
                    let eta = dot(&x, &p.beta);
                    match (request.target, draws.family.latent()) {
                        (Target::Mean, Some(latent)) => {
                            let lp = LatentTParams::new(eta, p.sigma, p.nu)?;
                            Ok(mixture_mean(request.m_ref, &lp, latent)? / request.m_ref as f64)
                        }
                        _ => Ok(sigmoid(eta)),
                    }
                })
                .collect::<Result<_>>()?;
            let (hpd_low, hpd_high) = hpd_interval(&values, 0.95)?;
            Ok(TrajectoryPoint { time: t, estimate: median_lower(&values)?, hpd_low, hpd_high })
        })
        .collect()
}

pub fn write_trajectory_csv<W: Write>(points: &[TrajectoryPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "estimate", "hpd_low", "hpd_high"]).map_err(crate::sampler::csv_error)?;
    for p in points {
        w.write_record([
            format_float(p.time),
            format_float(p.estimate),
            format_float(p.hpd_low),
            format_float(p.hpd_high),
        ])
        .map_err(crate::sampler::csv_error)?;
    }
    w.flush()?;
    Ok(())
}
