//! WAIC, K-L influence and simulation-based residual checks.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial as BinomialDist, Discrete};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, mean, mix64, sample_variance, sigmoid};
use crate::model::{clamp_p, Dataset, Design, Family, ModelSpec};
use crate::sampler::{csv_error, format_float, PosteriorDraws};
use crate::summary::{WaicSummary, SCHEMA_VERSION};

/// Calibration level at which an observation is flagged as influential.
pub const CALIBRATION_CUTOFF: f64 = 0.99;
/// Values above this are capped in emitted plot data.
pub const KL_PLOT_CAP: f64 = 4.0;

const BOOTSTRAP_STREAM: u64 = 0xB007_5EED_0000_0000;

/// K-L divergence at which the calibration reaches [`CALIBRATION_CUTOFF`]:
/// `−ln(1 − (2c − 1)²)/2`.
pub fn kl_flag_threshold() -> f64 {
    let s = 2.0 * CALIBRATION_CUTOFF - 1.0;
    -(1.0 - s * s).ln() / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaicResult {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

impl WaicResult {
    /// Deviance-scale value `−2·waic` (lower is better).
    pub fn deviance(&self) -> f64 {
        -2.0 * self.waic
    }
}

fn check_matrix(loglik: &[Vec<f64>], min_draws: usize) -> Result<usize> {
    if loglik.len() < min_draws {
        return Err(Error::domain(format!("at least {min_draws} draws are required")));
    }
    let n_obs = loglik[0].len();
    if loglik.iter().any(|r| r.len() != n_obs) {
        return Err(Error::domain("log-likelihood rows have different lengths"));
    }
    if loglik.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("log-likelihood matrix contains non-finite values"));
    }
    Ok(n_obs)
}

fn column(loglik: &[Vec<f64>], j: usize) -> Vec<f64> {
    loglik.iter().map(|r| r[j]).collect()
}

/// WAIC from a draws × observations log-likelihood matrix:
/// `lppd = Σ_j ln mean_k exp(ll_kj)`, `p_waic = Σ_j var_k(ll_kj)`,
/// `waic = lppd − p_waic`.
pub fn waic(loglik: &[Vec<f64>]) -> Result<WaicResult> {
    let n_obs = check_matrix(loglik, 2)?;
    let ln_k = (loglik.len() as f64).ln();
    let (mut lppd, mut p_waic) = (0.0, 0.0);
    for j in 0..n_obs {
        let col = column(loglik, j);
        lppd += log_sum_exp(&col) - ln_k;
        p_waic += sample_variance(&col);
    }
    Ok(WaicResult { waic: lppd - p_waic, lppd, p_waic })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlInfluence {
    pub kl: f64,
    pub calibration: f64,
    pub flag: bool,
}

/// `0.5·(1 + √(1 − exp(−2·kl)))`.
pub fn calibration(kl: f64) -> f64 {
    0.5 * (1.0 + (-(-2.0 * kl).exp()).ln_1p().exp().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub entries: Vec<KlInfluence>,
    /// Number of small negative estimates clipped to zero.
    pub clipped: usize,
}

/// Per-observation K-L divergence between the full and leave-one-out
/// posteriors: `ln mean_k exp(−ll_kj) + mean_k ll_kj`.
pub fn kl_influence(loglik: &[Vec<f64>]) -> Result<KlReport> {
    let n_obs = check_matrix(loglik, 1)?;
    let ln_k = (loglik.len() as f64).ln();
    let mut clipped = 0;
    let entries = (0..n_obs)
        .map(|j| {
            let col = column(loglik, j);
            let neg: Vec<f64> = col.iter().map(|v| -v).collect();
            let first = col[0];
            let mut kl = if col.iter().all(|v| *v == first) {
                0.0
            } else {
                log_sum_exp(&neg) - ln_k + mean(&col)
            };
            if kl < 0.0 {
                clipped += 1;
                kl = 0.0;
            }
            let c = calibration(kl);
            KlInfluence { kl, calibration: c, flag: c >= CALIBRATION_CUTOFF }
        })
        .collect();
    Ok(KlReport { entries, clipped })
}

/// Posterior-predictive draw of one count.
#[allow(clippy::too_many_arguments)]
fn simulate_count<R: Rng>(rng: &mut R, family: Family, m: u32, eta: f64, sigma: f64, nu: f64, delta: f64) -> u32 {
    let p = match family {
        Family::Binomial => sigmoid(eta),
        Family::BetaBinomial => {
            let p = clamp_p(sigmoid(eta));
            Beta::new(p * delta, (1.0 - p) * delta).map_or(p, |b| b.sample(rng))
        }
        Family::BinomialLogitNormal => {
            let z: f64 = StandardNormal.sample(rng);
            sigmoid(eta + sigma * z)
        }
        Family::BinomialLogitT => {
            let t: f64 = match StudentT::new(nu) {
                Ok(d) => d.sample(rng),
                Err(_) => StandardNormal.sample(rng),
            };
            sigmoid(eta + sigma * t)
        }
    };
    Binomial::new(m as u64, p.clamp(0.0, 1.0)).expect("valid binomial").sample(rng) as u32
}

/// Randomized PIT residuals with the number of simulations used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledResiduals {
    pub values: Vec<f64>,
    pub n_sim: usize,
}

struct Predictor<'a> {
    design: Design,
    draws: &'a PosteriorDraws,
    params: Vec<crate::sampler::DrawParams>,
}

impl<'a> Predictor<'a> {
    fn new(dataset: &Dataset, spec: &ModelSpec, draws: &'a PosteriorDraws) -> Result<Self> {
        if draws.n_draws() == 0 {
            return Err(Error::domain("no posterior draws"));
        }
        if spec.family != draws.family {
            return Err(Error::Config("draws were produced under a different family".into()));
        }
        let design = Design::new(dataset, spec)?;
        if design.cluster_ids != draws.cluster_ids || design.n_fixed() != draws.fixed_names.len() {
            return Err(Error::Config("draws do not match the dataset and model".into()));
        }
        let params = (0..draws.n_draws()).map(|k| draws.draw_params(k)).collect();
        Ok(Self { design, draws, params })
    }

    fn simulate<R: Rng>(&self, rng: &mut R, k: usize, i: usize) -> u32 {
        let p = &self.params[k];
        let d = &self.design;
        let eta = d.fixed_part(i, &p.beta) + d.random_part(i, &p.u);
        simulate_count(rng, self.draws.family, d.m[i], eta, p.sigma, p.nu, p.delta)
    }
}

/// Randomized PIT residual of each observation against `n_sim`
/// posterior-predictive replicates, each drawn at a uniformly chosen
/// retained draw with a fresh latent value.
pub fn scaled_residuals(
    dataset: &Dataset,
    spec: &ModelSpec,
    draws: &PosteriorDraws,
    n_sim: usize,
    seed: u64,
) -> Result<ScaledResiduals> {
    if n_sim < 100 {
        return Err(Error::Config("n_sim must be at least 100".into()));
    }
    let pred = Predictor::new(dataset, spec, draws)?;
    let n_draws = draws.n_draws();
    let values = (0..pred.design.n_obs())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(i as u64)));
            let y = pred.design.y[i];
            let (mut below, mut equal) = (0usize, 0usize);
            for _ in 0..n_sim {
                let k = rng.random_range(0..n_draws);
                let sim = pred.simulate(&mut rng, k, i);
                if sim < y {
                    below += 1;
                } else if sim == y {
                    equal += 1;
                }
            }
            let u: f64 = rng.random();
            (below as f64 + u * (equal as f64 + 1.0)) / (n_sim as f64 + 1.0)
        })
        .collect();
    Ok(ScaledResiduals { values, n_sim })
}

/// Asymptotic Kolmogorov p-value with the small-sample correction
/// `λ = (√n + 0.12 + 0.11/√n)·D`.
pub fn ks_uniform_test(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = x.clamp(0.0, 1.0);
            (f - i as f64 / nf).max((i as f64 + 1.0) / nf - f)
        })
        .fold(0.0, f64::max);
    let sqrt_n = nf.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_survival(lambda))
}

/// `P(K > λ) = 2 Σ (−1)^{k−1} exp(−2k²λ²)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Exact two-sided binomial test: total probability of outcomes no more
/// likely than the observed count.
pub fn binomial_test_two_sided(successes: u64, trials: u64, p0: f64) -> Result<f64> {
    if successes > trials {
        return Err(Error::domain("successes exceed trials"));
    }
    let dist = BinomialDist::new(p0, trials).map_err(|e| Error::domain(e.to_string()))?;
    let observed = dist.pmf(successes);
    let tol = observed * (1.0 + 1e-7);
    let p: f64 = (0..=trials).map(|k| dist.pmf(k)).filter(|&q| q <= tol).sum();
    Ok(p.min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTests {
    pub ks_statistic: f64,
    pub p_uniformity: f64,
    pub dispersion_statistic: f64,
    pub p_dispersion: f64,
    pub outlier_count: usize,
    pub p_outliers: f64,
    pub n_sim: usize,
    pub n_boot: usize,
}

/// Variance of `(y − ŷ)/√v̂` over observations with positive `v̂`.
fn dispersion_statistic(y: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let z: Vec<f64> = y
        .iter()
        .zip(mean.iter().zip(var))
        .filter(|(_, (_, v))| **v > 0.0)
        .map(|(y, (m, v))| (y - m) / v.sqrt())
        .collect();
    if z.len() < 2 {
        f64::NAN
    } else {
        sample_variance(&z)
    }
}

/// Uniformity (KS), dispersion (posterior-predictive bootstrap over
/// `n_boot` replicate datasets) and outlier (exact binomial) tests.
pub fn residual_tests(
    residuals: &ScaledResiduals,
    dataset: &Dataset,
    spec: &ModelSpec,
    draws: &PosteriorDraws,
    seed: u64,
    n_boot: usize,
) -> Result<ResidualTests> {
    if n_boot < 2 {
        return Err(Error::Config("n_boot must be at least 2".into()));
    }
    let pred = Predictor::new(dataset, spec, draws)?;
    let n = pred.design.n_obs();
    if residuals.values.len() != n {
        return Err(Error::domain("residual count does not match the dataset"));
    }
    let (ks_statistic, p_uniformity) = ks_uniform_test(&residuals.values);

    let n_draws = draws.n_draws();
    let replicates: Vec<Vec<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ BOOTSTRAP_STREAM ^ mix64(b as u64)));
            let k = rng.random_range(0..n_draws);
            (0..n).map(|i| pred.simulate(&mut rng, k, i) as f64).collect()
        })
        .collect();
    let nb = n_boot as f64;
    let mut mu = vec![0.0; n];
    let mut var = vec![0.0; n];
    for i in 0..n {
        let col: Vec<f64> = replicates.iter().map(|r| r[i]).collect();
        mu[i] = col.iter().sum::<f64>() / nb;
        var[i] = sample_variance(&col);
    }
    let y_obs: Vec<f64> = pred.design.y.iter().map(|&v| v as f64).collect();
    let t_obs = dispersion_statistic(&y_obs, &mu, &var);
    let t_rep: Vec<f64> = replicates.iter().map(|r| dispersion_statistic(r, &mu, &var)).collect();
    let p_dispersion = if t_obs.is_finite() {
        let ge = t_rep.iter().filter(|t| **t >= t_obs).count() as f64 / nb;
        let le = t_rep.iter().filter(|t| **t <= t_obs).count() as f64 / nb;
        (2.0 * ge.min(le)).min(1.0)
    } else {
        1.0
    };

    let n_sim = residuals.n_sim as f64;
    let (lo, hi) = (1.0 / (n_sim + 1.0), n_sim / (n_sim + 1.0));
    let outlier_count = residuals.values.iter().filter(|&&r| r < lo || r > hi).count();
    let p_outliers = binomial_test_two_sided(outlier_count as u64, n as u64, 2.0 / (n_sim + 1.0))?;

    Ok(ResidualTests {
        ks_statistic,
        p_uniformity,
        dispersion_statistic: t_obs,
        p_dispersion,
        outlier_count,
        p_outliers,
        n_sim: residuals.n_sim,
        n_boot,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub obs_id: usize,
    pub cluster_id: String,
    pub kl: f64,
    pub calibration: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub family: Family,
    pub waic: WaicSummary,
    pub kl_threshold: f64,
    pub n_flagged: usize,
    pub kl_clipped: usize,
    pub kl: Vec<KlRow>,
    pub residual_tests: ResidualTests,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsOptions {
    pub n_sim: usize,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self { n_sim: 250, n_boot: 250, seed: 7 }
    }
}

/// WAIC, K-L influence and residual tests for a fit. Requires the
/// log-likelihood matrix.
pub fn diagnose(
    dataset: &Dataset,
    spec: &ModelSpec,
    draws: &PosteriorDraws,
    options: &DiagnosticsOptions,
) -> Result<DiagnosticsReport> {
    let loglik = draws
        .loglik
        .as_ref()
        .ok_or_else(|| Error::Config("diagnostics need the log-likelihood matrix".into()))?;
    let w = waic(loglik)?;
    let kl = kl_influence(loglik)?;
    let residuals = scaled_residuals(dataset, spec, draws, options.n_sim, options.seed)?;
    let tests = residual_tests(&residuals, dataset, spec, draws, options.seed, options.n_boot)?;
    let rows: Vec<KlRow> = kl
        .entries
        .iter()
        .zip(&dataset.records)
        .enumerate()
        .map(|(j, (e, r))| KlRow {
            obs_id: j + 1,
            cluster_id: r.cluster_id.clone(),
            kl: e.kl,
            calibration: e.calibration,
            flag: e.flag,
        })
        .collect();
    Ok(DiagnosticsReport {
        schema_version: SCHEMA_VERSION,
        family: draws.family,
        waic: w.into(),
        kl_threshold: kl_flag_threshold(),
        n_flagged: rows.iter().filter(|r| r.flag).count(),
        kl_clipped: kl.clipped,
        kl: rows,
        residual_tests: tests,
        seed: options.seed,
    })
}

impl DiagnosticsReport {
    /// Per-observation K-L table; `kl_plot` is the K-L value capped for display.
    pub fn write_kl_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["obs_id", "cluster_id", "kl", "calibration", "flag", "kl_plot"])
            .map_err(csv_error)?;
        for r in &self.kl {
            w.write_record([
                r.obs_id.to_string(),
                r.cluster_id.clone(),
                format_float(r.kl),
                format_float(r.calibration),
                r.flag.to_string(),
                format_float(r.kl.min(KL_PLOT_CAP)),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}
