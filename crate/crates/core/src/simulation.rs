//! Scenario-driven data generation, tail contamination and replication metrics.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Beta, Binomial, Distribution, Normal, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::model::{clamp_p, Dataset, Family, ModelSpec, ObservationRecord};
use crate::sampler::{csv_error, format_float, run_mcmc, SamplerConfig};
use crate::summary::{posterior_summary, FitSummary};

/// Covariate columns of simulated datasets.
pub const SIM_COLUMNS: [&str; 3] = ["time", "group", "cov"];
pub const SIM_FIXED_TERMS: [&str; 4] = ["intercept", "time", "group:time", "cov"];
pub const SIM_RANDOM_TERMS: [&str; 2] = ["intercept", "time"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub n_clusters: usize,
    pub beta0: f64,
    pub beta_time: f64,
    pub beta_tx: f64,
    pub beta_cnt: f64,
    /// Inverse latent scale, `ω = 1/σ`.
    pub omega: f64,
    pub nu: f64,
    pub sd_a0: f64,
    pub sd_a1: f64,
    pub rho: f64,
    pub m: u32,
    pub n_obs_per_cluster: usize,
    pub family: Family,
    /// Beta-binomial dispersion, used only by that family.
    pub delta: Option<f64>,
    pub cov_mean: f64,
    pub cov_sd: f64,
}

impl Default for Scenario {
    /// Simulation ID 1 of the performance study.
    fn default() -> Self {
        Self {
            id: "1".into(),
            n_clusters: 100,
            beta0: 1.5,
            beta_time: -0.05,
            beta_tx: 0.1,
            beta_cnt: 0.02,
            omega: 0.2,
            nu: 5.0,
            sd_a0: 0.4,
            sd_a1: 0.3,
            rho: -0.5,
            m: 30,
            n_obs_per_cluster: 11,
            family: Family::BinomialLogitT,
            delta: None,
            cov_mean: 60.0,
            cov_sd: 5.0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega", self.omega),
            ("nu", self.nu),
            ("sd_a0", self.sd_a0),
            ("sd_a1", self.sd_a1),
            ("cov_sd", self.cov_sd),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("scenario `{name}` must be positive, got {v}")));
            }
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Config("scenario `rho` must lie in (−1, 1)".into()));
        }
        if self.n_clusters == 0 || self.n_obs_per_cluster == 0 {
            return Err(Error::Config("scenario needs at least one cluster and observation".into()));
        }
        if self.family == Family::BetaBinomial && !self.delta.is_some_and(|d| d > 0.0 && d.is_finite()) {
            return Err(Error::Config("beta-binomial scenarios need a positive `delta`".into()));
        }
        Ok(())
    }

    /// Latent scale `σ = 1/ω`.
    pub fn sigma(&self) -> f64 {
        1.0 / self.omega
    }

    /// Model specification matching the data-generating design.
    pub fn model_spec(&self, family: Family) -> ModelSpec {
        ModelSpec::new(family, &SIM_FIXED_TERMS, &SIM_RANDOM_TERMS).expect("static terms parse")
    }

    /// True values keyed by parameter name, for the parameters the given
    /// family estimates.
    pub fn truth(&self, family: Family) -> Vec<(String, f64)> {
        let mut t = vec![
            ("beta_intercept".to_string(), self.beta0),
            ("beta_time".to_string(), self.beta_time),
            ("beta_group:time".to_string(), self.beta_tx),
            ("beta_cov".to_string(), self.beta_cnt),
        ];
        if family == self.family {
            if family.is_logit_mixture() {
                t.push(("sigma".into(), self.sigma()));
            }
            if family == Family::BinomialLogitT {
                t.push(("nu".into(), self.nu));
            }
            if let (Family::BetaBinomial, Some(d)) = (family, self.delta) {
                t.push(("delta".into(), d));
            }
        }
        t.push(("sd_intercept".into(), self.sd_a0));
        t.push(("sd_time".into(), self.sd_a1));
        t.push(("corr_intercept_time".into(), self.rho));
        t
    }
}

/// Generates one dataset from the scenario.
pub fn simulate_dataset(scenario: &Scenario, seed: u64) -> Result<Dataset> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cov_dist = Normal::new(scenario.cov_mean, scenario.cov_sd).expect("validated");
    let group_dist = Bernoulli::new(0.5).expect("valid");
    let t_dist = StudentT::new(scenario.nu).expect("validated");
    let sigma = scenario.sigma();
    let (s0, s1, rho) = (scenario.sd_a0, scenario.sd_a1, scenario.rho);
    let mut records = Vec::with_capacity(scenario.n_clusters * scenario.n_obs_per_cluster);
    for c in 0..scenario.n_clusters {
        let z0: f64 = StandardNormal.sample(&mut rng);
        let z1: f64 = StandardNormal.sample(&mut rng);
        let a0 = s0 * z0;
        let a1 = s1 * (rho * z0 + (1.0 - rho * rho).sqrt() * z1);
        let cov = cov_dist.sample(&mut rng);
        let group = if group_dist.sample(&mut rng) { 1.0 } else { 0.0 };
        for j in 0..scenario.n_obs_per_cluster {
            let time = j as f64;
            let eta = scenario.beta0 + a0 + (scenario.beta_time + a1) * time
                + scenario.beta_tx * group * time
                + scenario.beta_cnt * cov;
            let p = match scenario.family {
                Family::Binomial => sigmoid(eta),
                Family::BetaBinomial => {
                    let p = clamp_p(sigmoid(eta));
                    let d = scenario.delta.expect("validated");
                    Beta::new(p * d, (1.0 - p) * d).map_or(p, |b| b.sample(&mut rng))
                }
                Family::BinomialLogitNormal => {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sigmoid(eta + sigma * z)
                }
                Family::BinomialLogitT => sigmoid(eta + sigma * t_dist.sample(&mut rng)),
            };
            let y = Binomial::new(scenario.m as u64, p).expect("valid").sample(&mut rng) as u32;
            records.push(ObservationRecord {
                cluster_id: (c + 1).to_string(),
                y,
                m: scenario.m,
                covariates: vec![time, group, cov],
            });
        }
    }
    Dataset::new(SIM_COLUMNS.iter().map(|s| s.to_string()).collect(), records)
}

/// Rows touched by [`contaminate_with_log`], as indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContaminationLog {
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
}

pub fn contaminate(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    contaminate_with_log(dataset, rate, seed).map(|(d, _)| d)
}

/// Replaces `round(rate·n)` uniformly chosen counts by draws from
/// `{0, 1, 2}` and, independently, as many by draws from `{m−2, m−1, m}`.
/// A row chosen for both tails keeps the upper-tail value.
pub fn contaminate_with_log(dataset: &Dataset, rate: f64, seed: u64) -> Result<(Dataset, ContaminationLog)> {
    if !(0.0..=0.5).contains(&rate) {
        return Err(Error::domain(format!("contamination rate must lie in [0, 0.5], got {rate}")));
    }
    let n = dataset.len();
    let k = (rate * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lower: Vec<usize> = sample(&mut rng, n, k).into_vec();
    let mut upper: Vec<usize> = sample(&mut rng, n, k).into_vec();
    lower.sort_unstable();
    upper.sort_unstable();
    let mut out = dataset.clone();
    for &i in &lower {
        let r = &mut out.records[i];
        r.y = rng.random_range(0..=2u32).min(r.m);
    }
    for &i in &upper {
        let r = &mut out.records[i];
        r.y = r.m.saturating_sub(rng.random_range(0..=2u32));
    }
    Ok((out, ContaminationLog { lower, upper }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub parameter: String,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    pub hpd_length: f64,
    pub coverage: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub scenario_id: String,
    pub rows: Vec<MetricRow>,
}

impl SimMetrics {
    pub fn get(&self, parameter: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "parameter", "true_value", "bias", "rmse", "hpd_length", "coverage"])
            .map_err(csv_error)?;
        for r in &self.rows {
            w.write_record([
                self.scenario_id.clone(),
                r.parameter.clone(),
                format_float(r.truth),
                format_float(r.bias),
                format_float(r.rmse),
                format_float(r.hpd_length),
                format_float(r.coverage),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bias, RMSE, mean HPD length and HPD coverage across replications, for
/// each `(parameter, truth)` pair present in the summaries.
pub fn aggregate_metrics(
    summaries: &[FitSummary],
    truth: &[(String, f64)],
    scenario_id: &str,
) -> Result<SimMetrics> {
    if summaries.len() < 2 {
        return Err(Error::domain("at least two replications are required"));
    }
    let mut rows = Vec::new();
    for (name, value) in truth {
        let entries: Vec<_> = summaries.iter().filter_map(|s| s.get(name)).collect();
        if entries.len() != summaries.len() {
            continue;
        }
        let n = entries.len() as f64;
        let bias = entries.iter().map(|e| e.estimate - value).sum::<f64>() / n;
        let mse = entries.iter().map(|e| (e.estimate - value).powi(2)).sum::<f64>() / n;
        let hpd_length = entries.iter().map(|e| e.hpd_high - e.hpd_low).sum::<f64>() / n;
        let coverage = entries
            .iter()
            .filter(|e| e.hpd_low <= *value && *value <= e.hpd_high)
            .count() as f64
            / n;
        rows.push(MetricRow {
            parameter: name.clone(),
            truth: *value,
            bias,
            rmse: mse.sqrt(),
            hpd_length,
            coverage,
            n: entries.len(),
        });
    }
    Ok(SimMetrics { scenario_id: scenario_id.to_string(), rows })
}

/// A replication study: simulate, optionally contaminate, fit, summarize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicationStudy {
    pub scenario: Scenario,
    pub fit_family: Family,
    pub replications: usize,
    pub master_seed: u64,
    pub contamination_rate: f64,
    pub sampler: SamplerConfig,
}

impl Default for ReplicationStudy {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            fit_family: Family::BinomialLogitT,
            replications: 100,
            master_seed: 1,
            contamination_rate: 0.0,
            sampler: SamplerConfig {
                n_iterations: 3000,
                burn_in: 1000,
                thin: 10,
                compute_loglik: false,
                ..SamplerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutcome {
    pub summaries: Vec<FitSummary>,
    pub metrics: SimMetrics,
}

/// Fits one replication; replication `r` uses seed `master_seed + r` for
/// data generation, contamination and sampling.
pub fn run_replication(study: &ReplicationStudy, r: usize) -> Result<FitSummary> {
    let seed = study.master_seed.wrapping_add(r as u64);
    let mut data = simulate_dataset(&study.scenario, seed)?;
    if study.contamination_rate > 0.0 {
        data = contaminate(&data, study.contamination_rate, crate::math::mix64(seed))?;
    }
    let spec = study.scenario.model_spec(study.fit_family);
    let config = SamplerConfig { seed, ..study.sampler.clone() };
    posterior_summary(&run_mcmc(&data, &spec, &config)?)
}

pub fn run_study(study: &ReplicationStudy) -> Result<StudyOutcome> {
    let summaries: Vec<FitSummary> = (0..study.replications)
        .into_par_iter()
        .map(|r| run_replication(study, r))
        .collect::<Result<_>>()?;
    let metrics = aggregate_metrics(&summaries, &study.scenario.truth(study.fit_family), &study.scenario.id)?;
    Ok(StudyOutcome { summaries, metrics })
}

/// One row per replication and parameter.
pub fn write_replications_csv<W: Write>(summaries: &[FitSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replication", "parameter", "estimate", "hpd_low", "hpd_high"])
        .map_err(csv_error)?;
    for (r, s) in summaries.iter().enumerate() {
        for p in &s.parameters {
            w.write_record([
                r.to_string(),
                p.parameter.clone(),
                format_float(p.estimate),
                format_float(p.hpd_low),
                format_float(p.hpd_high),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::summary::{ParameterSummary, SCHEMA_VERSION};
    use std::collections::BTreeMap;

    fn summary_with(estimate: f64, lo: f64, hi: f64) -> FitSummary {
        FitSummary {
            schema_version: SCHEMA_VERSION,
            family: Family::Binomial,
            n_chains: 1,
            n_draws: 1,
            seeds: vec![],
            parameters: vec![ParameterSummary {
                parameter: "beta_intercept".into(),
                estimate,
                hpd_low: lo,
                hpd_high: hi,
                rhat: None,
            }],
            waic: None,
            acceptance: BTreeMap::new(),
            warnings: vec![],
        }
    }

    #[test]
    fn scenario_one_generates_1100_rows() {
        let ds = simulate_dataset(&Scenario::default(), 1).unwrap();
        assert_eq!(ds.len(), 1100);
        assert!(ds.records.iter().all(|r| r.y <= 30 && r.m == 30));
        assert_eq!(ds, simulate_dataset(&Scenario::default(), 1).unwrap());
        assert_ne!(ds, simulate_dataset(&Scenario::default(), 2).unwrap());
    }

    #[test]
    fn contamination_counts_and_values() {
        let sc = Scenario { n_clusters: 50, ..Scenario::default() };
        let ds = simulate_dataset(&sc, 3).unwrap();
        assert_eq!(contaminate(&ds, 0.0, 9).unwrap(), ds);
        let (out, log) = contaminate_with_log(&ds, 0.10, 9).unwrap();
        assert_eq!((log.lower.len(), log.upper.len()), (55, 55));
        for &i in &log.upper {
            assert!(out.records[i].y >= 28);
        }
        for &i in &log.lower {
            if !log.upper.contains(&i) {
                assert!(out.records[i].y <= 2);
            }
        }
        for (a, b) in out.records.iter().zip(&ds.records) {
            assert_eq!((&a.cluster_id, a.m, &a.covariates), (&b.cluster_id, b.m, &b.covariates));
        }
        assert!(contaminate(&ds, 0.6, 1).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let truth = vec![("beta_intercept".to_string(), 1.5)];
        let exact = vec![summary_with(1.5, 1.5, 1.5), summary_with(1.5, 1.5, 1.5)];
        let m = aggregate_metrics(&exact, &truth, "1").unwrap();
        let r = m.get("beta_intercept").unwrap();
        assert_eq!((r.bias, r.rmse, r.coverage), (0.0, 0.0, 1.0));

        let spread = vec![summary_with(2.5, 2.0, 3.0), summary_with(0.5, 0.0, 2.0)];
        let r = aggregate_metrics(&spread, &truth, "1").unwrap().rows[0].clone();
        assert!(r.bias.abs() < 1e-15);
        assert!((r.rmse - 1.0).abs() < 1e-15);
        assert_eq!(r.coverage, 0.5);
        assert!((r.hpd_length - 1.5).abs() < 1e-15);
        assert!(aggregate_metrics(&spread[..1], &truth, "1").is_err());
    }
}
