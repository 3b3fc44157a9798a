//! Single-chain Metropolis-within-Gibbs engine.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use super::adapt::Adaptive;
use super::{ChainDraws, SamplerConfig};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, sample_gaussian_canonical, sample_wishart, spd_inverse};
use crate::math::{logit, sigmoid};
use crate::model::{
    beta_binomial_logit_log_pmf, binomial_logit_log_pmf, dot, log_posterior, Design, Family,
    ModelSpec, ParameterState,
};
use crate::priors::{half_t_log_pdf, CovarianceState, PriorConfig};

const BLOCK_BETA: &str = "beta";
const BLOCK_U: &str = "u";
const BLOCK_XI: &str = "xi";
const BLOCK_SIGMA: &str = "sigma";
const BLOCK_RESCALE: &str = "rescale";
const BLOCK_NU: &str = "nu";
const BLOCK_DELTA: &str = "delta";

#[inline]
fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[inline]
fn gamma_draw<R: Rng>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng)
}

/// Shape and rate of `λ | ξ, η, σ, ν ~ Gamma((ν+1)/2, (ν + r²)/2)` with
/// `r = (ξ − η)/σ`.
pub fn lambda_conditional(nu: f64, r: f64) -> (f64, f64) {
    (0.5 * (nu + 1.0), 0.5 * (nu + r * r))
}

/// Ridge-penalized logistic fit ignoring random effects. Returns the
/// estimate and the inverse penalized information.
pub(crate) fn irls_logistic(design: &Design, beta_variance: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let p = design.n_fixed();
    let mut beta = vec![0.0; p];
    let mut info = DMatrix::<f64>::identity(p, p) / beta_variance;
    for _ in 0..100 {
        info = DMatrix::<f64>::identity(p, p) / beta_variance;
        let mut score = DVector::<f64>::zeros(p);
        for i in 0..design.n_obs() {
            let x = design.x_row(i);
            let m = design.m[i] as f64;
            let pr = sigmoid(dot(x, &beta));
            let w = (m * pr * (1.0 - pr)).max(1e-10);
            let resid = design.y[i] as f64 - m * pr;
            for a in 0..p {
                score[a] += x[a] * resid;
                for b in 0..=a {
                    info[(a, b)] += w * x[a] * x[b];
                }
            }
        }
        for a in 0..p {
            score[a] -= beta[a] / beta_variance;
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let step = cholesky(&info)?.solve(&score);
        let max_step = step.amax();
        let damp = if max_step > 5.0 { 5.0 / max_step } else { 1.0 };
        for a in 0..p {
            beta[a] += damp * step[a];
        }
        if max_step < 1e-10 {
            break;
        }
    }
    Ok((beta, spd_inverse(&info)?))
}

struct Engine<'a> {
    design: &'a Design,
    priors: &'a PriorConfig,
    family: Family,
    rng: ChaCha8Rng,

    beta: Vec<f64>,
    u: Vec<Vec<f64>>,
    precision: DMatrix<f64>,
    psi: Vec<f64>,
    sigma: f64,
    nu: f64,
    epsilon: f64,
    delta: f64,
    xi: Vec<f64>,
    lambda: Vec<f64>,

    eta: Vec<f64>,
    loglik: Vec<f64>,
    scratch_eta: Vec<f64>,
    scratch_ll: Vec<f64>,

    beta_chol: DMatrix<f64>,
    u_chol: Vec<DMatrix<f64>>,
    shift_pairs: Vec<(usize, usize)>,

    a_beta: Adaptive,
    a_u: Vec<Adaptive>,
    a_xi: Vec<Adaptive>,
    a_sigma: Adaptive,
    a_rescale: Adaptive,
    a_nu: Adaptive,
    a_delta: Adaptive,
}

impl<'a> Engine<'a> {
    fn new(design: &'a Design, spec: &'a ModelSpec, config: &'a SamplerConfig, seed: u64) -> Result<Self> {
        let family = design.family;
        let priors = &spec.priors;
        let (n, p, d, n_clusters) = (design.n_obs(), design.n_fixed(), design.n_random(), design.n_clusters());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut beta, cov) = irls_logistic(design, priors.beta_variance)
            .map_err(|e| Error::Initialization(format!("logistic start failed: {e}")))?;
        let beta_chol = cholesky(&cov)?.unpack();

        let mut sigma = 1.0;
        let mut nu = 10.0;
        let mut delta = 10.0;
        let jitter = config.init_jitter;
        if jitter > 0.0 {
            for (k, b) in beta.iter_mut().enumerate() {
                *b += jitter * std_normal(&mut rng) * (3.0 * cov[(k, k)].sqrt() + 0.1);
            }
            sigma *= (jitter * std_normal(&mut rng)).exp();
            nu *= (jitter * std_normal(&mut rng)).exp();
            delta *= (jitter * std_normal(&mut rng)).exp();
        }
        let xi: Vec<f64> = (0..n)
            .map(|i| logit((design.y[i] as f64 + 0.5) / (design.m[i] as f64 + 1.0)))
            .collect();
        let a_xi = (0..n)
            .map(|i| {
                let pr = sigmoid(xi[i]);
                let info = design.m[i] as f64 * pr * (1.0 - pr) + 1.0 / (sigma * sigma);
                Adaptive::new(2.4 / info.sqrt())
            })
            .collect();
        let shift_pairs = design
            .fixed_names
            .iter()
            .enumerate()
            .filter(|(j, _)| design.centers[*j] == 0.0)
            .filter_map(|(j, name)| design.random_names.iter().position(|r| r == name).map(|k| (j, k)))
            .collect();
        let mut engine = Self {
            design,
            priors,
            family,
            rng,
            beta,
            u: vec![vec![0.0; d]; n_clusters],
            precision: DMatrix::identity(d, d),
            psi: vec![1.0; d],
            sigma,
            nu,
            epsilon: 0.2,
            delta,
            xi,
            lambda: vec![1.0; n],
            eta: vec![0.0; n],
            loglik: vec![0.0; n],
            scratch_eta: vec![0.0; n],
            scratch_ll: vec![0.0; n],
            beta_chol,
            u_chol: vec![DMatrix::identity(d, d); n_clusters],
            shift_pairs,
            a_beta: Adaptive::new(2.38 / (p as f64).sqrt()),
            a_u: vec![Adaptive::new(2.38 / (d.max(1) as f64).sqrt()); n_clusters],
            a_xi,
            a_sigma: Adaptive::new(0.1),
            a_rescale: Adaptive::new(0.05),
            a_nu: Adaptive::new(0.3),
            a_delta: Adaptive::new(0.2),
        };
        engine.refresh_eta();
        engine.refresh_loglik();
        engine.refresh_proposals()?;
        let lp = log_posterior(design, &engine.parameter_state(), spec)
            .map_err(|e| Error::Initialization(format!("log-posterior at the initial state: {e}")))?;
        if !lp.is_finite() {
            return Err(Error::Initialization("non-finite log-posterior at the initial state".into()));
        }
        Ok(engine)
    }

    fn parameter_state(&self) -> ParameterState {
        let d = self.design.n_random();
        let sigma_re = if d > 0 { spd_inverse(&self.precision).unwrap_or_else(|_| DMatrix::identity(d, d)) } else { DMatrix::zeros(0, 0) };
        ParameterState {
            beta: self.beta.clone(),
            u: self.u.clone(),
            covariance: CovarianceState { sigma: sigma_re, psi: self.psi.clone() },
            sigma: self.sigma,
            nu: self.nu,
            epsilon: self.epsilon,
            delta: self.delta,
            xi: self.xi.clone(),
            lambda: self.lambda.clone(),
        }
    }

    fn refresh_eta(&mut self) {
        for i in 0..self.design.n_obs() {
            self.eta[i] = self.design.fixed_part(i, &self.beta) + self.design.random_part(i, &self.u);
        }
    }

    #[inline]
    fn obs_loglik(&self, i: usize, eta: f64, delta: f64) -> f64 {
        let d = self.design;
        match self.family {
            Family::BetaBinomial => beta_binomial_logit_log_pmf(d.y[i], d.m[i], eta, delta),
            _ => binomial_logit_log_pmf(d.y[i], d.m[i], 0.0, eta),
        }
    }

    fn refresh_loglik(&mut self) {
        if self.family.is_logit_mixture() {
            return;
        }
        for i in 0..self.design.n_obs() {
            self.loglik[i] = self.obs_loglik(i, self.eta[i], self.delta);
        }
    }

    /// Expected information weight of `η_i` at the current state.
    fn info_weight(&self, i: usize) -> f64 {
        let m = self.design.m[i] as f64;
        let pr = sigmoid(self.eta[i]);
        let w = m * pr * (1.0 - pr);
        if self.family == Family::BetaBinomial {
            w / (1.0 + (m - 1.0).max(0.0) / (self.delta + 1.0))
        } else {
            w
        }
    }

    /// Laplace-shaped proposal factors for the random-walk blocks, evaluated
    /// at the current state. Only called during burn-in.
    fn refresh_proposals(&mut self) -> Result<()> {
        if self.family.is_logit_mixture() {
            return Ok(());
        }
        let design = self.design;
        let (p, d) = (design.n_fixed(), design.n_random());
        let mut info = DMatrix::<f64>::identity(p, p) / self.priors.beta_variance;
        for i in 0..design.n_obs() {
            let w = self.info_weight(i).max(1e-10);
            let x = design.x_row(i);
            for a in 0..p {
                for b in 0..p {
                    info[(a, b)] += w * x[a] * x[b];
                }
            }
        }
        self.beta_chol = cholesky(&spd_inverse(&info)?)?.unpack();
        if d > 0 {
            for c in 0..design.n_clusters() {
                let mut info = self.precision.clone();
                for &i in &design.cluster_obs[c] {
                    let w = self.info_weight(i).max(1e-10);
                    let z = design.z_row(i);
                    for a in 0..d {
                        for b in 0..d {
                            info[(a, b)] += w * z[a] * z[b];
                        }
                    }
                }
                self.u_chol[c] = cholesky(&spd_inverse(&info)?)?.unpack();
            }
        }
        Ok(())
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio
    }

    fn correlated_step(&mut self, chol: &DMatrix<f64>, scale: f64) -> Vec<f64> {
        let k = chol.nrows();
        let z: Vec<f64> = (0..k).map(|_| std_normal(&mut self.rng)).collect();
        (0..k)
            .map(|a| scale * (0..=a).map(|b| chol[(a, b)] * z[b]).sum::<f64>())
            .collect()
    }

    fn beta_prior(&self, beta: &[f64]) -> f64 {
        -beta.iter().map(|b| b * b).sum::<f64>() / (2.0 * self.priors.beta_variance)
    }

    fn u_prior(&self, u: &[f64]) -> f64 {
        let d = u.len();
        let mut q = 0.0;
        for a in 0..d {
            for b in 0..d {
                q += u[a] * self.precision[(a, b)] * u[b];
            }
        }
        -0.5 * q
    }

    // ---- binomial and beta-binomial blocks ----

    fn update_beta_rw(&mut self) {
        let design = self.design;
        let chol = self.beta_chol.clone();
        let step = self.correlated_step(&chol, self.a_beta.scale());
        let proposal: Vec<f64> = self.beta.iter().zip(&step).map(|(b, s)| b + s).collect();
        let mut log_ratio = self.beta_prior(&proposal) - self.beta_prior(&self.beta);
        for i in 0..design.n_obs() {
            let eta = self.eta[i] + dot(design.x_row(i), &step);
            let ll = self.obs_loglik(i, eta, self.delta);
            self.scratch_eta[i] = eta;
            self.scratch_ll[i] = ll;
            log_ratio += ll - self.loglik[i];
        }
        let ok = log_ratio.is_finite() && self.accept(log_ratio);
        self.a_beta.record(ok);
        if ok {
            self.beta = proposal;
            std::mem::swap(&mut self.eta, &mut self.scratch_eta);
            std::mem::swap(&mut self.loglik, &mut self.scratch_ll);
        }
    }

    fn update_u_rw(&mut self) {
        let design = self.design;
        for c in 0..design.n_clusters() {
            let chol = self.u_chol[c].clone();
            let step = self.correlated_step(&chol, self.a_u[c].scale());
            let proposal: Vec<f64> = self.u[c].iter().zip(&step).map(|(u, s)| u + s).collect();
            let mut log_ratio = self.u_prior(&proposal) - self.u_prior(&self.u[c]);
            for &i in &design.cluster_obs[c] {
                let eta = self.eta[i] + dot(design.z_row(i), &step);
                let ll = self.obs_loglik(i, eta, self.delta);
                self.scratch_eta[i] = eta;
                self.scratch_ll[i] = ll;
                log_ratio += ll - self.loglik[i];
            }
            let ok = log_ratio.is_finite() && self.accept(log_ratio);
            self.a_u[c].record(ok);
            if ok {
                self.u[c] = proposal;
                for &i in &design.cluster_obs[c] {
                    self.eta[i] = self.scratch_eta[i];
                    self.loglik[i] = self.scratch_ll[i];
                }
            }
        }
    }

    fn update_delta(&mut self) {
        let z = std_normal(&mut self.rng);
        let proposal = self.delta * (self.a_delta.scale() * z).exp();
        let (shape, rate) = (self.priors.delta_gamma_shape, self.priors.delta_gamma_rate);
        // Gamma prior plus the log-scale Jacobian.
        let prior = |x: f64| shape * x.ln() - rate * x;
        let mut log_ratio = prior(proposal) - prior(self.delta);
        for i in 0..self.design.n_obs() {
            let ll = self.obs_loglik(i, self.eta[i], proposal);
            self.scratch_ll[i] = ll;
            log_ratio += ll - self.loglik[i];
        }
        let ok = proposal.is_finite() && proposal > 0.0 && log_ratio.is_finite() && self.accept(log_ratio);
        self.a_delta.record(ok);
        if ok {
            self.delta = proposal;
            std::mem::swap(&mut self.loglik, &mut self.scratch_ll);
        }
    }

    // ---- logit-mixture blocks ----

    fn latent_weight(&self, i: usize) -> f64 {
        if self.family == Family::BinomialLogitT {
            self.lambda[i]
        } else {
            1.0
        }
    }

    fn update_beta_gibbs(&mut self) -> Result<()> {
        let design = self.design;
        let p = design.n_fixed();
        let s2 = self.sigma * self.sigma;
        let mut prec = DMatrix::<f64>::identity(p, p) / self.priors.beta_variance;
        let mut b = DVector::<f64>::zeros(p);
        for i in 0..design.n_obs() {
            let w = self.latent_weight(i) / s2;
            let x = design.x_row(i);
            let target = self.xi[i] - design.random_part(i, &self.u);
            for a in 0..p {
                b[a] += w * x[a] * target;
                for c in 0..=a {
                    prec[(a, c)] += w * x[a] * x[c];
                }
            }
        }
        for a in 0..p {
            for c in 0..a {
                prec[(c, a)] = prec[(a, c)];
            }
        }
        let draw = sample_gaussian_canonical(&mut self.rng, &prec, &b)?;
        self.beta = draw.iter().copied().collect();
        Ok(())
    }

    fn update_u_gibbs(&mut self) -> Result<()> {
        let design = self.design;
        let d = design.n_random();
        let s2 = self.sigma * self.sigma;
        for c in 0..design.n_clusters() {
            let mut prec = self.precision.clone();
            let mut b = DVector::<f64>::zeros(d);
            for &i in &design.cluster_obs[c] {
                let w = self.latent_weight(i) / s2;
                let z = design.z_row(i);
                let target = self.xi[i] - design.fixed_part(i, &self.beta);
                for a in 0..d {
                    b[a] += w * z[a] * target;
                    for e in 0..d {
                        prec[(a, e)] += w * z[a] * z[e];
                    }
                }
            }
            let draw = sample_gaussian_canonical(&mut self.rng, &prec, &b)?;
            self.u[c] = draw.iter().copied().collect();
        }
        Ok(())
    }

    #[inline]
    fn binomial_kernel(&self, i: usize, xi: f64) -> f64 {
        binomial_logit_log_pmf(self.design.y[i], self.design.m[i], 0.0, xi)
    }

    fn update_xi(&mut self) {
        let inv_2s2 = 0.5 / (self.sigma * self.sigma);
        for i in 0..self.design.n_obs() {
            let cur = self.xi[i];
            let prop = cur + self.a_xi[i].scale() * std_normal(&mut self.rng);
            let w = self.latent_weight(i) * inv_2s2;
            let eta = self.eta[i];
            let log_ratio = self.binomial_kernel(i, prop) - self.binomial_kernel(i, cur)
                - w * ((prop - eta).powi(2) - (cur - eta).powi(2));
            let ok = self.accept(log_ratio);
            self.a_xi[i].record(ok);
            if ok {
                self.xi[i] = prop;
            }
        }
    }

    /// Latent log-density of all `ξ` with `λ` integrated out, up to terms
    /// constant in `(σ, ν)`.
    fn collapsed_latent(&self, sigma: f64, nu: f64) -> f64 {
        let n = self.design.n_obs() as f64;
        if self.family == Family::BinomialLogitT {
            let c = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln() - sigma.ln();
            let scale = 1.0 / (nu * sigma * sigma);
            let tail: f64 = self
                .xi
                .iter()
                .zip(&self.eta)
                .map(|(x, e)| ((x - e) * (x - e) * scale).ln_1p())
                .sum();
            n * c - 0.5 * (nu + 1.0) * tail
        } else {
            let ss: f64 = self.xi.iter().zip(&self.eta).map(|(x, e)| (x - e) * (x - e)).sum();
            -n * sigma.ln() - ss / (2.0 * sigma * sigma)
        }
    }

    fn sigma_prior(&self, sigma: f64) -> f64 {
        half_t_log_pdf(sigma, self.priors.sigma_halft_scale, self.priors.sigma_halft_df)
    }

    fn update_sigma(&mut self) {
        let prop = self.sigma * (self.a_sigma.scale() * std_normal(&mut self.rng)).exp();
        let log_ratio = self.collapsed_latent(prop, self.nu) - self.collapsed_latent(self.sigma, self.nu)
            + self.sigma_prior(prop)
            - self.sigma_prior(self.sigma)
            + (prop / self.sigma).ln();
        let ok = prop > 0.0 && prop.is_finite() && log_ratio.is_finite() && self.accept(log_ratio);
        self.a_sigma.record(ok);
        if ok {
            self.sigma = prop;
        }
    }

    /// Joint move `ξ ← η + c(ξ − η)`, `σ ← cσ`. The latent density is
    /// invariant up to `c⁻ⁿ`, which cancels the Jacobian `cⁿ⁺¹` except for
    /// one factor of `c`.
    fn update_rescale(&mut self) {
        let log_c = self.a_rescale.scale() * std_normal(&mut self.rng);
        let c = log_c.exp();
        let prop_sigma = self.sigma * c;
        let mut log_ratio = self.sigma_prior(prop_sigma) - self.sigma_prior(self.sigma) + log_c;
        for i in 0..self.design.n_obs() {
            let x = self.eta[i] + c * (self.xi[i] - self.eta[i]);
            self.scratch_eta[i] = x;
            log_ratio += self.binomial_kernel(i, x) - self.binomial_kernel(i, self.xi[i]);
        }
        let ok = prop_sigma > 0.0 && prop_sigma.is_finite() && log_ratio.is_finite() && self.accept(log_ratio);
        self.a_rescale.record(ok);
        if ok {
            self.sigma = prop_sigma;
            self.xi.copy_from_slice(&self.scratch_eta);
        }
    }

    fn update_nu(&mut self) {
        let prop = self.nu * (self.a_nu.scale() * std_normal(&mut self.rng)).exp();
        let (shape, eps) = (self.priors.nu_gamma_shape, self.epsilon);
        // Gamma(shape, ε) prior plus the log-scale Jacobian.
        let prior = |v: f64| shape * v.ln() - eps * v;
        let log_ratio = self.collapsed_latent(self.sigma, prop) - self.collapsed_latent(self.sigma, self.nu)
            + prior(prop)
            - prior(self.nu);
        let ok = prop > 0.0 && prop.is_finite() && log_ratio.is_finite() && self.accept(log_ratio);
        self.a_nu.record(ok);
        if ok {
            self.nu = prop;
        }
    }

    fn update_epsilon(&mut self) {
        let shape = self.priors.nu_gamma_shape + 1.0;
        let rate = self.priors.nu_exp_rate + self.nu;
        self.epsilon = gamma_draw(&mut self.rng, shape, rate);
    }

    fn update_lambda(&mut self) {
        for i in 0..self.design.n_obs() {
            let r = (self.xi[i] - self.eta[i]) / self.sigma;
            let (shape, rate) = lambda_conditional(self.nu, r);
            self.lambda[i] = gamma_draw(&mut self.rng, shape, rate);
        }
    }

    // ---- shared blocks ----

    /// Exact translation move along `β_j + c`, `u_ik − c` for a term present
    /// in both the fixed and random parts; `η` is unchanged.
    fn update_shift(&mut self) {
        let n_clusters = self.design.n_clusters();
        for idx in 0..self.shift_pairs.len() {
            let (j, k) = self.shift_pairs[idx];
            let v = self.priors.beta_variance;
            let a = n_clusters as f64 * self.precision[(k, k)] + 1.0 / v;
            let mut b = -self.beta[j] / v;
            for u in &self.u {
                b += (0..u.len()).map(|e| self.precision[(k, e)] * u[e]).sum::<f64>();
            }
            let c = b / a + std_normal(&mut self.rng) / a.sqrt();
            self.beta[j] += c;
            for u in &mut self.u {
                u[k] -= c;
            }
        }
    }

    fn update_covariance(&mut self) -> Result<()> {
        let d = self.design.n_random();
        if d == 0 {
            return Ok(());
        }
        let nu_h = self.priors.mght_df;
        let df = self.priors.wishart_df(d);
        let mut s = DMatrix::<f64>::zeros(d, d);
        for k in 0..d {
            s[(k, k)] = 2.0 * nu_h * self.psi[k];
        }
        for u in &self.u {
            for a in 0..d {
                for b in 0..d {
                    s[(a, b)] += u[a] * u[b];
                }
            }
        }
        let scale = spd_inverse(&s)?;
        self.precision = sample_wishart(&mut self.rng, df + self.u.len() as f64, &scale)?;
        crate::linalg::symmetrize(&mut self.precision);
        let rate0 = self.priors.psi_rate();
        for k in 0..d {
            let rate = rate0 + nu_h * self.precision[(k, k)];
            self.psi[k] = gamma_draw(&mut self.rng, 0.5 * (df + 1.0), rate);
        }
        Ok(())
    }

    fn sweep(&mut self) -> Result<()> {
        let has_re = self.design.n_random() > 0;
        if self.family.is_logit_mixture() {
            self.update_beta_gibbs()?;
            if has_re {
                self.update_shift();
                self.update_u_gibbs()?;
            }
            self.refresh_eta();
            self.update_xi();
            self.update_sigma();
            self.update_rescale();
            if self.family == Family::BinomialLogitT {
                self.update_nu();
                self.update_epsilon();
                self.update_lambda();
            }
        } else {
            self.update_beta_rw();
            self.update_beta_rw();
            if has_re {
                self.update_shift();
                self.update_u_rw();
            }
            if self.family == Family::BetaBinomial {
                self.update_delta();
            }
        }
        self.update_covariance()
    }

    fn adaptives_mut(&mut self) -> Vec<&mut Adaptive> {
        let mut v: Vec<&mut Adaptive> = vec![
            &mut self.a_beta,
            &mut self.a_sigma,
            &mut self.a_rescale,
            &mut self.a_nu,
            &mut self.a_delta,
        ];
        v.extend(self.a_u.iter_mut());
        v.extend(self.a_xi.iter_mut());
        v
    }

    fn step_sizes(&self) -> Vec<f64> {
        let mut v = vec![
            self.a_beta.log_scale,
            self.a_sigma.log_scale,
            self.a_rescale.log_scale,
            self.a_nu.log_scale,
            self.a_delta.log_scale,
        ];
        v.extend(self.a_u.iter().map(|a| a.log_scale));
        v.extend(self.a_xi.iter().map(|a| a.log_scale));
        v.into_iter().map(f64::exp).collect()
    }

    /// Constrained parameter vector in the order of [`super::parameter_names`].
    fn snapshot(&self) -> Result<Vec<f64>> {
        let mut row = self.beta.clone();
        if self.family.is_logit_mixture() {
            row.push(self.sigma);
        }
        if self.family == Family::BinomialLogitT {
            row.push(self.nu);
            row.push(self.epsilon);
        }
        if self.family == Family::BetaBinomial {
            row.push(self.delta);
        }
        let d = self.design.n_random();
        if d > 0 {
            let cov = spd_inverse(&self.precision)?;
            for a in 0..d {
                row.push(cov[(a, a)].sqrt());
            }
            for a in 0..d {
                for b in a + 1..d {
                    row.push(cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt());
                }
            }
            for a in 0..d {
                row.push(self.precision[(a, a)]);
            }
            for a in 0..d {
                for b in a + 1..d {
                    row.push(self.precision[(a, b)]);
                }
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter value in draw".into()));
        }
        Ok(row)
    }

    fn acceptance(&self) -> Vec<(String, f64)> {
        let rate = |a: &Adaptive| {
            let (acc, prop) = a.totals();
            if prop == 0 { f64::NAN } else { acc as f64 / prop as f64 }
        };
        let pooled = |v: &[Adaptive]| {
            let (acc, prop) = v.iter().map(Adaptive::totals).fold((0, 0), |s, t| (s.0 + t.0, s.1 + t.1));
            if prop == 0 { f64::NAN } else { acc as f64 / prop as f64 }
        };
        let has_re = self.design.n_random() > 0;
        let mut out = Vec::new();
        if self.family.is_logit_mixture() {
            out.push((BLOCK_BETA.to_string(), 1.0));
            if has_re {
                out.push((BLOCK_U.to_string(), 1.0));
            }
            out.push((BLOCK_XI.to_string(), pooled(&self.a_xi)));
            out.push((BLOCK_SIGMA.to_string(), rate(&self.a_sigma)));
            out.push((BLOCK_RESCALE.to_string(), rate(&self.a_rescale)));
            if self.family == Family::BinomialLogitT {
                out.push((BLOCK_NU.to_string(), rate(&self.a_nu)));
                out.push(("epsilon".to_string(), 1.0));
                out.push(("lambda".to_string(), 1.0));
            }
        } else {
            out.push((BLOCK_BETA.to_string(), rate(&self.a_beta)));
            if has_re {
                out.push((BLOCK_U.to_string(), pooled(&self.a_u)));
            }
            if self.family == Family::BetaBinomial {
                out.push((BLOCK_DELTA.to_string(), rate(&self.a_delta)));
            }
        }
        if has_re {
            out.push(("shift".to_string(), 1.0));
            out.push(("covariance".to_string(), 1.0));
        }
        out
    }
}

/// Runs one chain on a prepared design.
pub(crate) fn run_chain_on_design(
    design: &Design,
    spec: &ModelSpec,
    config: &SamplerConfig,
    seed: u64,
) -> Result<ChainDraws> {
    config.validate()?;
    let mut engine = Engine::new(design, spec, config, seed)?;
    let n_keep = config.retained_per_chain();
    let mut draws = Vec::with_capacity(n_keep);
    let mut random_effects = Vec::with_capacity(n_keep);
    let mut steps_at_burn_in = Vec::new();
    for t in 1..=config.n_iterations {
        engine.sweep()?;
        if t <= config.burn_in {
            if t % config.adapt_window == 0 {
                let target = config.target_accept;
                for a in engine.adaptives_mut() {
                    a.adapt(target);
                }
                engine.refresh_proposals()?;
            }
            if t == config.burn_in {
                for a in engine.adaptives_mut() {
                    a.reset_totals();
                }
                steps_at_burn_in = engine.step_sizes();
            }
        } else if (t - config.burn_in) % config.thin == 0 && draws.len() < n_keep {
            draws.push(engine.snapshot()?);
            random_effects.push(engine.u.iter().flatten().copied().collect());
        }
    }
    if config.burn_in == 0 {
        steps_at_burn_in = engine.step_sizes();
    }
    let acceptance = engine.acceptance();
    let warnings = acceptance
        .iter()
        .filter(|(_, r)| *r < 0.01)
        .map(|(b, r)| format!("block `{b}` acceptance rate {r:.4} below 0.01 after adaptation"))
        .collect();
    Ok(ChainDraws {
        seed,
        draws,
        random_effects,
        acceptance,
        steps_at_burn_in,
        steps_final: engine.step_sizes(),
        warnings,
    })
}
