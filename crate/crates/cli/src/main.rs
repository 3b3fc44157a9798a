use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use robcount::diagnostics::diagnose;
use robcount::io::{load_dataset, save_dataset, write_json, FileDigest, Manifest, RunConfig};
use robcount::model::{Dataset, Design, Family, ModelSpec, Term};
use robcount::sampler::{run_mcmc, PosteriorDraws, SamplerConfig};
use robcount::simulation::{contaminate, run_study, simulate_dataset, write_replications_csv};
use robcount::summary::{posterior_summary, predict_trajectory, write_trajectory_csv, Target, WaicSummary, SCHEMA_VERSION};
use robcount::{Error, Result};

const THREADS_ENV: &str = "ROBCOUNT_THREADS";

/// Outlier-robust Bayesian mixed models for bounded counts.
#[derive(Debug, Parser)]
#[command(name = "robcount", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (falls back to ROBCOUNT_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write the posterior summary and draws.
    Fit(ModelArgs),
    /// Population-level trajectory of the mean or pseudo-median proportion.
    Predict(PredictArgs),
    /// WAIC, K-L influence and residual tests.
    Diagnose(ModelArgs),
    /// Simulate a dataset, or run a replication study.
    Simulate(SimulateArgs),
    /// Replace a fraction of counts by tail values.
    Contaminate(ContaminateArgs),
    /// Fit several families and rank them by WAIC deviance.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Input dataset (CSV with id, y, m and covariate columns).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    family: Option<Family>,
    /// Fixed-effect terms, comma separated (e.g. `1,time,group:time,age`).
    #[arg(long, value_delimiter = ',')]
    fixed: Option<Vec<String>>,
    /// Random-effect terms, comma separated.
    #[arg(long, value_delimiter = ',')]
    random: Option<Vec<String>>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Draw dump from a previous `fit`; the model is refitted when absent.
    #[arg(long)]
    draws: Option<PathBuf>,
    #[arg(long)]
    target: Option<Target>,
    /// Treatment group indicator.
    #[arg(long)]
    group: Option<u8>,
    /// Fixed covariate values, e.g. `age=52.3`.
    #[arg(long = "set", value_parser = parse_assignment)]
    set: Vec<(String, f64)>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run this many replications and write bias/RMSE/coverage tables.
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Debug, Args)]
struct ContaminateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Families to compare, comma separated (default: all four).
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<Family>>,
}

fn parse_assignment(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("invalid number in `{s}`"))?;
    Ok((k.trim().to_string(), v))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let env_threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer")))?),
        Err(_) => None,
    };
    if let Some(t) = cli.threads.or(config.threads).or(env_threads) {
        config.threads = Some(t);
        if t == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Fit(args) => {
            apply_model_args(&mut config, &args)?;
            fit_cmd(&config)
        }
        Command::Predict(args) => {
            apply_model_args(&mut config, &args.model)?;
            if let Some(t) = args.target {
                config.predict.target = t;
            }
            if let Some(g) = args.group {
                config.predict.group = g;
            }
            config.predict.covariates.extend(args.set);
            predict_cmd(&config, args.draws.as_deref())
        }
        Command::Diagnose(args) => {
            apply_model_args(&mut config, &args)?;
            diagnose_cmd(&config)
        }
        Command::Simulate(args) => {
            apply_common(&mut config, &args.common);
            if let Some(seed) = args.common.seed {
                config.simulation.master_seed = seed;
            }
            if let Some(r) = args.rate {
                config.simulation.contamination_rate = r;
            }
            config.validate()?;
            simulate_cmd(&config, args.replications)
        }
        Command::Contaminate(args) => {
            apply_common(&mut config, &args.common);
            if let Some(seed) = args.common.seed {
                config.contaminate.seed = seed;
            }
            if let Some(r) = args.rate {
                config.contaminate.rate = r;
            }
            config.validate()?;
            contaminate_cmd(&config)
        }
        Command::Compare(args) => {
            apply_model_args(&mut config, &args.model)?;
            if let Some(f) = args.families {
                config.compare.families = f;
            }
            config.validate()?;
            compare_cmd(&config)
        }
    }
}

fn apply_common(config: &mut RunConfig, args: &CommonArgs) {
    if let Some(d) = &args.data {
        config.data = Some(d.clone());
    }
    if let Some(o) = &args.output {
        config.output = o.clone();
    }
}

fn apply_model_args(config: &mut RunConfig, args: &ModelArgs) -> Result<()> {
    apply_common(config, &args.common);
    let s = &mut config.sampler;
    if let Some(v) = args.common.seed {
        s.seed = v;
    }
    if let Some(v) = args.chains {
        s.n_chains = v;
    }
    if let Some(v) = args.iterations {
        s.n_iterations = v;
    }
    if let Some(v) = args.burn_in {
        s.burn_in = v;
    }
    if let Some(v) = args.thin {
        s.thin = v;
    }
    if let Some(f) = args.family {
        config.model.family = f;
    }
    let parse_terms = |v: &[String]| v.iter().map(|t| t.parse::<Term>()).collect::<Result<Vec<_>>>();
    if let Some(f) = &args.fixed {
        config.model.fixed_terms = parse_terms(f)?;
    }
    if let Some(r) = &args.random {
        config.model.random_terms = parse_terms(r)?;
    }
    config.validate()
}

fn load_data(config: &RunConfig) -> Result<(Dataset, PathBuf)> {
    let path = config
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (use --data or `data` in the config)".into()))?;
    Ok((load_dataset(&path, config.covariates.as_deref())?, path))
}

fn prepare_output(config: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&config.output)?;
    Ok(&config.output)
}

/// Records digests of `files` (relative to the output directory) and writes
/// `<command>.manifest.json`.
fn finish(mut manifest: Manifest, out: &Path, input: Option<&Path>, files: &[&str]) -> Result<()> {
    if let Some(p) = input {
        manifest.inputs.push(FileDigest::of(p, &p.display().to_string())?);
    }
    for f in files {
        manifest.outputs.push(FileDigest::of(&out.join(f), f)?);
    }
    write_json(&out.join(format!("{}.manifest.json", manifest.command)), &manifest)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn fit_cmd(config: &RunConfig) -> Result<()> {
    let (data, path) = load_data(config)?;
    let draws = run_mcmc(&data, &config.model, &config.sampler)?;
    let summary = posterior_summary(&draws)?;
    let out = prepare_output(config)?;
    write_json(&out.join("summary.json"), &summary)?;
    summary.write_csv(create(&out.join("summary.csv"))?)?;
    draws.write_csv(create(&out.join("draws.csv"))?)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = Manifest::new("fit", config, draws.seeds());
    finish(manifest, out, Some(&path), &["summary.json", "summary.csv", "draws.csv"])
}

fn predict_cmd(config: &RunConfig, draws_path: Option<&Path>) -> Result<()> {
    if config.predict.target == Target::PseudoMedian && config.model.family == Family::BetaBinomial {
        return Err(Error::UnsupportedTarget("the beta-binomial pseudo-median has no closed form".into()));
    }
    let (draws, input) = match draws_path {
        Some(p) => (read_draws(config, p)?, p.to_path_buf()),
        None => {
            let (data, path) = load_data(config)?;
            let sampler = SamplerConfig { compute_loglik: false, ..config.sampler.clone() };
            (run_mcmc(&data, &config.model, &sampler)?, path)
        }
    };
    let points = predict_trajectory(&draws, &config.predict)?;
    let out = prepare_output(config)?;
    let name = match config.predict.target {
        Target::Mean => "trajectory_mean.csv",
        Target::PseudoMedian => "trajectory_pseudo_median.csv",
    };
    write_trajectory_csv(&points, create(&out.join(name))?)?;
    finish(Manifest::new("predict", config, draws.seeds()), out, Some(&input), &[name])
}

/// Reads a draw dump. Column centers are not stored in the dump, so a
/// centered model needs the original data to rebuild them.
fn read_draws(config: &RunConfig, path: &Path) -> Result<PosteriorDraws> {
    let spec = &config.model;
    let mut draws = PosteriorDraws::read_csv(
        File::open(path)?,
        spec.family,
        spec.fixed_names(),
        spec.random_names(),
    )?;
    if spec.center_covariates {
        let (data, _) = load_data(config)
            .map_err(|_| Error::Config("a centered model needs --data to rebuild column centers".into()))?;
        draws.centers = Design::new(&data, spec)?.centers;
    }
    Ok(draws)
}

fn diagnose_cmd(config: &RunConfig) -> Result<()> {
    let (data, path) = load_data(config)?;
    let sampler = SamplerConfig { compute_loglik: true, ..config.sampler.clone() };
    let draws = run_mcmc(&data, &config.model, &sampler)?;
    let report = diagnose(&data, &config.model, &draws, &config.diagnostics)?;
    let out = prepare_output(config)?;
    write_json(&out.join("diagnostics.json"), &report)?;
    report.write_kl_csv(create(&out.join("kl.csv"))?)?;
    let mut seeds = draws.seeds();
    seeds.push(config.diagnostics.seed);
    finish(Manifest::new("diagnose", config, seeds), out, Some(&path), &["diagnostics.json", "kl.csv"])
}

fn simulate_cmd(config: &RunConfig, replications: Option<usize>) -> Result<()> {
    let out = prepare_output(config)?;
    let study = &config.simulation;
    match replications {
        None => {
            let mut data = simulate_dataset(&study.scenario, study.master_seed)?;
            if study.contamination_rate > 0.0 {
                data = contaminate(&data, study.contamination_rate, robcount::math::mix64(study.master_seed))?;
            }
            save_dataset(&data, &out.join("simulated.csv"))?;
            finish(Manifest::new("simulate", config, vec![study.master_seed]), out, None, &["simulated.csv"])
        }
        Some(n) => {
            let study = robcount::simulation::ReplicationStudy { replications: n, ..study.clone() };
            let outcome = run_study(&study)?;
            write_replications_csv(&outcome.summaries, create(&out.join("replications.csv"))?)?;
            outcome.metrics.write_csv(create(&out.join("metrics.csv"))?)?;
            let seeds = (0..n as u64).map(|r| study.master_seed.wrapping_add(r)).collect();
            finish(Manifest::new("simulate", config, seeds), out, None, &["replications.csv", "metrics.csv"])
        }
    }
}

fn contaminate_cmd(config: &RunConfig) -> Result<()> {
    let (data, path) = load_data(config)?;
    let opts = &config.contaminate;
    let out_data = contaminate(&data, opts.rate, opts.seed)?;
    let out = prepare_output(config)?;
    save_dataset(&out_data, &out.join("contaminated.csv"))?;
    finish(Manifest::new("contaminate", config, vec![opts.seed]), out, Some(&path), &["contaminated.csv"])
}

#[derive(Debug, Serialize)]
struct CompareRow {
    family: Family,
    rank: usize,
    #[serde(flatten)]
    waic: WaicSummary,
}

#[derive(Debug, Serialize)]
struct CompareReport {
    schema_version: u32,
    rows: Vec<CompareRow>,
}

fn compare_cmd(config: &RunConfig) -> Result<()> {
    let (data, path) = load_data(config)?;
    let sampler = SamplerConfig { compute_loglik: true, ..config.sampler.clone() };
    let mut rows = Vec::new();
    for &family in &config.compare.families {
        let spec = ModelSpec { family, ..config.model.clone() };
        let draws = run_mcmc(&data, &spec, &sampler)?;
        let summary = posterior_summary(&draws)?;
        let waic = summary.waic.expect("log-likelihood requested");
        rows.push(CompareRow { family, rank: 0, waic });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].waic.deviance.total_cmp(&rows[b].waic.deviance));
    for (rank, &i) in order.iter().enumerate() {
        rows[i].rank = rank + 1;
    }
    let out = prepare_output(config)?;
    let mut w = csv::Writer::from_writer(create(&out.join("compare.csv"))?);
    w.write_record(["family", "waic", "lppd", "p_waic", "deviance", "rank"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.family.as_str().to_string(),
            format!("{:?}", r.waic.waic),
            format!("{:?}", r.waic.lppd),
            format!("{:?}", r.waic.p_waic),
            format!("{:?}", r.waic.deviance),
            r.rank.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    drop(w);
    write_json(&out.join("compare.json"), &CompareReport { schema_version: SCHEMA_VERSION, rows })?;
    let manifest = Manifest::new("compare", config, vec![config.sampler.seed]);
    finish(manifest, out, Some(&path), &["compare.csv", "compare.json"])
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
