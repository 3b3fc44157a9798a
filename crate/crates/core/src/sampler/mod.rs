//! Adaptive Metropolis-within-Gibbs sampling over multiple chains.

mod adapt;
mod chain;
mod rhat;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{marginal_log_likelihood, Dataset, Design, Family, ModelSpec};

pub use chain::lambda_conditional;
pub use rhat::gelman_rubin;

/// Increment used to derive chain seeds from the master seed.
pub const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_window: usize,
    pub target_accept: f64,
    /// Spread of random starting points around the default initial values;
    /// zero starts every chain at the same point.
    pub init_jitter: f64,
    /// Whether to compute the per-observation marginal log-likelihood matrix.
    pub compute_loglik: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_iterations: 27_500,
            burn_in: 2_500,
            thin: 50,
            seed: 20_240_601,
            adapt_window: 50,
            target_accept: 0.44,
            init_jitter: 0.0,
            compute_loglik: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_chains == 0 {
            return bad("n_chains must be at least 1");
        }
        if self.burn_in >= self.n_iterations {
            return bad("burn_in must be smaller than n_iterations");
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.adapt_window == 0 {
            return bad("adapt_window must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return bad("init_jitter must be non-negative");
        }
        if self.retained_per_chain() == 0 {
            return bad("no draws retained: n_iterations − burn_in is smaller than thin");
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        self.n_iterations.saturating_sub(self.burn_in) / self.thin
    }

    pub fn chain_seed(&self, chain: usize) -> u64 {
        self.seed ^ (chain as u64).wrapping_mul(SEED_STRIDE)
    }
}

/// Retained output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub seed: u64,
    /// One row per retained draw, ordered as [`PosteriorDraws::parameter_names`].
    pub draws: Vec<Vec<f64>>,
    /// Random effects per retained draw, cluster-major (`u[c][k]` at `c·d + k`).
    pub random_effects: Vec<Vec<f64>>,
    /// Acceptance rate per block after burn-in.
    pub acceptance: Vec<(String, f64)>,
    /// Random-walk step sizes at the end of burn-in and at the end of the run.
    pub steps_at_burn_in: Vec<f64>,
    pub steps_final: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Parameter values of one retained draw needed to evaluate the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawParams {
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub nu: f64,
    pub delta: f64,
    pub u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub family: Family,
    pub parameter_names: Vec<String>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub cluster_ids: Vec<String>,
    pub centers: Vec<f64>,
    pub chains: Vec<ChainDraws>,
    /// Marginal log-likelihood, one row per retained draw in chain order.
    pub loglik: Option<Vec<Vec<f64>>>,
    pub warnings: Vec<String>,
}

/// Parameter names for a family and term lists, in draw-row order.
pub fn parameter_names(family: Family, fixed: &[String], random: &[String]) -> Vec<String> {
    let mut names: Vec<String> = fixed.iter().map(|t| format!("beta_{t}")).collect();
    if family.is_logit_mixture() {
        names.push("sigma".into());
    }
    if family == Family::BinomialLogitT {
        names.push("nu".into());
        names.push("epsilon".into());
    }
    if family == Family::BetaBinomial {
        names.push("delta".into());
    }
    let d = random.len();
    names.extend(random.iter().map(|t| format!("sd_{t}")));
    for a in 0..d {
        for b in a + 1..d {
            names.push(format!("corr_{}_{}", random[a], random[b]));
        }
    }
    names.extend(random.iter().map(|t| format!("tau_{t}")));
    for a in 0..d {
        for b in a + 1..d {
            names.push(format!("tau_{}_{}", random[a], random[b]));
        }
    }
    names
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameter_names.iter().position(|n| n == name)
    }

    /// Draws of one parameter, pooled in chain order.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.parameter_index(name)?;
        Some(self.chains.iter().flat_map(|c| c.draws.iter().map(move |r| r[j])).collect())
    }

    /// Draws of one parameter, one vector per chain.
    pub fn chain_columns(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let j = self.parameter_index(name)?;
        Some(self.chains.iter().map(|c| c.draws.iter().map(|r| r[j]).collect()).collect())
    }

    /// `(chain, index)` of the pooled draw `k`.
    fn locate(&self, mut k: usize) -> (usize, usize) {
        for (c, chain) in self.chains.iter().enumerate() {
            if k < chain.draws.len() {
                return (c, k);
            }
            k -= chain.draws.len();
        }
        panic!("draw index out of range");
    }

    /// Model parameters of pooled draw `k`. Parameters absent from the
    /// family are set to 1 and ignored downstream.
    pub fn draw_params(&self, k: usize) -> DrawParams {
        let (c, i) = self.locate(k);
        let row = &self.chains[c].draws[i];
        let get = |name: &str, default: f64| self.parameter_index(name).map_or(default, |j| row[j]);
        let d = self.random_names.len();
        let flat = self.chains[c].random_effects.get(i);
        let u = (0..self.cluster_ids.len())
            .map(|cl| match flat {
                Some(f) if d > 0 => f[cl * d..(cl + 1) * d].to_vec(),
                _ => vec![0.0; d],
            })
            .collect();
        DrawParams {
            beta: row[..self.fixed_names.len()].to_vec(),
            sigma: get("sigma", 1.0),
            nu: get("nu", 1.0),
            delta: get("delta", 1.0),
            u,
        }
    }

    /// Mean acceptance rate per block across chains.
    pub fn acceptance_rates(&self) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for c in &self.chains {
            for (b, r) in &c.acceptance {
                let e = sums.entry(b.clone()).or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
            }
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.chains.iter().map(|c| c.seed).collect()
    }

    /// Writes one row per retained draw: chain, draw, parameters, then
    /// random effects as `u_<cluster>_<term>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.parameter_names.iter().cloned());
        for id in &self.cluster_ids {
            for t in &self.random_names {
                header.push(format!("u_{id}_{t}"));
            }
        }
        w.write_record(&header).map_err(csv_error)?;
        for (c, chain) in self.chains.iter().enumerate() {
            for (i, row) in chain.draws.iter().enumerate() {
                let mut rec = vec![c.to_string(), i.to_string()];
                rec.extend(row.iter().map(|v| format_float(*v)));
                if let Some(u) = chain.random_effects.get(i) {
                    rec.extend(u.iter().map(|v| format_float(*v)));
                }
                w.write_record(&rec).map_err(csv_error)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a draw dump written by [`PosteriorDraws::write_csv`]. Term
    /// names, cluster ids and the family must be supplied by the caller;
    /// acceptance rates, seeds and the log-likelihood matrix are not stored.
    pub fn read_csv<R: Read>(
        reader: R,
        family: Family,
        fixed_names: Vec<String>,
        random_names: Vec<String>,
    ) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
        let names = parameter_names(family, &fixed_names, &random_names);
        if header.len() < 2 + names.len() || header[2..2 + names.len()] != names[..] {
            return Err(Error::Parse {
                row: 1,
                message: "draw file columns do not match the model specification".into(),
            });
        }
        let d = random_names.len();
        let extra = &header[2 + names.len()..];
        if d == 0 && !extra.is_empty() || d > 0 && extra.len() % d != 0 {
            return Err(Error::Parse { row: 1, message: "unexpected random-effect columns".into() });
        }
        let cluster_ids: Vec<String> = if d == 0 {
            Vec::new()
        } else {
            extra
                .chunks(d)
                .map(|chunk| {
                    let suffix = format!("_{}", random_names[0]);
                    chunk[0].trim_start_matches("u_").trim_end_matches(&suffix).to_string()
                })
                .collect()
        };
        let mut chains: Vec<ChainDraws> = Vec::new();
        for (row_no, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row: row_no + 2,
                    message: format!("invalid number `{s}`"),
                })
            };
            let chain: usize = rec[0].trim().parse().map_err(|_| Error::Parse {
                row: row_no + 2,
                message: "invalid chain index".into(),
            })?;
            while chains.len() <= chain {
                chains.push(ChainDraws {
                    seed: 0,
                    draws: Vec::new(),
                    random_effects: Vec::new(),
                    acceptance: Vec::new(),
                    steps_at_burn_in: Vec::new(),
                    steps_final: Vec::new(),
                    warnings: Vec::new(),
                });
            }
            let values: Vec<f64> = rec.iter().skip(2).map(parse).collect::<Result<_>>()?;
            chains[chain].draws.push(values[..names.len()].to_vec());
            chains[chain].random_effects.push(values[names.len()..].to_vec());
        }
        let p = fixed_names.len();
        Ok(Self {
            family,
            parameter_names: names,
            fixed_names,
            random_names,
            cluster_ids,
            centers: vec![0.0; p],
            chains,
            loglik: None,
            warnings: Vec::new(),
        })
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { row, message: e.to_string() }
}

/// Shortest round-trip decimal representation.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Runs a single chain with an explicit seed.
pub fn run_chain(dataset: &Dataset, spec: &ModelSpec, config: &SamplerConfig, seed: u64) -> Result<ChainDraws> {
    let design = Design::new(dataset, spec)?;
    chain::run_chain_on_design(&design, spec, config, seed)
}

/// Runs all chains (in parallel on the current rayon pool) and computes the
/// marginal log-likelihood matrix.
pub fn run_mcmc(dataset: &Dataset, spec: &ModelSpec, config: &SamplerConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let design = Design::new(dataset, spec)?;
    let chains: Vec<ChainDraws> = (0..config.n_chains)
        .into_par_iter()
        .map(|k| {
            chain::run_chain_on_design(&design, spec, config, config.chain_seed(k))
                .map_err(|e| Error::Chain { chain: k, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let warnings = chains
        .iter()
        .enumerate()
        .flat_map(|(k, c)| c.warnings.iter().map(move |w| format!("chain {k}: {w}")))
        .collect();
    let mut draws = PosteriorDraws {
        family: spec.family,
        parameter_names: parameter_names(spec.family, &design.fixed_names, &design.random_names),
        fixed_names: design.fixed_names.clone(),
        random_names: design.random_names.clone(),
        cluster_ids: design.cluster_ids.clone(),
        centers: design.centers.clone(),
        chains,
        loglik: None,
        warnings,
    };
    if config.compute_loglik {
        draws.loglik = Some(loglik_matrix(&design, &draws)?);
    }
    Ok(draws)
}

/// Marginal log-likelihood of every observation at every retained draw.
pub fn loglik_matrix(design: &Design, draws: &PosteriorDraws) -> Result<Vec<Vec<f64>>> {
    (0..draws.n_draws())
        .into_par_iter()
        .map(|k| {
            let dp = draws.draw_params(k);
            (0..design.n_obs())
                .map(|i| {
                    let eta = design.fixed_part(i, &dp.beta) + design.random_part(i, &dp.u);
                    let v = marginal_log_likelihood(design.y[i], design.m[i], eta, dp.sigma, dp.nu, dp.delta, design.family)?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::Numerical(format!("non-finite log-likelihood at observation {i}, draw {k}")))
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = SamplerConfig::default();
        assert_eq!(c.retained_per_chain() * c.n_chains, 2000);
        c.validate().unwrap();
        assert!(SamplerConfig { burn_in: 27_500, ..c.clone() }.validate().is_err());
        assert!(SamplerConfig { thin: 0, ..c.clone() }.validate().is_err());
        assert_eq!(c.chain_seed(0), c.seed);
        assert_eq!(c.chain_seed(2), c.seed ^ 2u64.wrapping_mul(SEED_STRIDE));
    }

    #[test]
    fn names_for_two_random_terms() {
        let names = parameter_names(
            Family::BinomialLogitT,
            &["intercept".into(), "time".into()],
            &["intercept".into(), "time".into()],
        );
        assert_eq!(
            names,
            [
                "beta_intercept",
                "beta_time",
                "sigma",
                "nu",
                "epsilon",
                "sd_intercept",
                "sd_time",
                "corr_intercept_time",
                "tau_intercept",
                "tau_time",
                "tau_intercept_time"
            ]
        );
    }
}
