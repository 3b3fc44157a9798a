//! Adaptive Gauss-Kronrod quadrature.
//!
//! [`integrate`] is a global adaptive scheme on a finite interval: the panel
//! with the largest error estimate is bisected until the summed error drops
//! below the requested tolerance. Panels use the 21-point Kronrod extension
//! of the 10-point Gauss-Legendre rule.
//!
//! [`integrate_latent`] evaluates `ln ∫ exp(k(ξ)) f(ξ) dξ` for a location-scale
//! latent density `f` and a unimodal log-kernel `k`, working on the
//! standardized variable `s = (ξ − η)/σ`. It starts from `[-20, 20]` and
//! doubles the half-width until a rigorous bound on the tail contribution is
//! negligible relative to the accumulated integral.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_408_811_165_530,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

// Gauss weights for the odd-indexed Kronrod nodes.
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Result of a quadrature.
#[derive(Debug, Clone, Copy)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

/// Tolerances for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub relative: f64,
    pub absolute: f64,
    pub max_panels: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            relative: 1e-10,
            absolute: 0.0,
            max_panels: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// One GK21 panel with the QUADPACK error heuristic.
fn gk21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Panel {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_k = fc * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = res_k * 0.5;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    res_abs *= half.abs();
    res_asc *= half.abs();
    let mut error = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && error != 0.0 {
        error = res_asc * (200.0 * error / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * res_abs);
    }
    Panel { a, b, value, error }
}

/// Integrates `f` over `[a, b]`, starting from the panels delimited by `a`,
/// the interior `breakpoints` (any order; points outside `(a, b)` ignored),
/// and `b`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    tol: Tolerance,
) -> Result<Integral> {
    if !(a.is_finite() && b.is_finite()) || b < a {
        return Err(Error::domain(format!("invalid interval [{a}, {b}]")));
    }
    let mut cuts: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|x| x.is_finite() && *x > a && *x < b)
        .collect();
    cuts.push(a);
    cuts.push(b);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut heap = BinaryHeap::new();
    let mut evaluations = 0;
    let mut total = 0.0;
    let mut total_err = 0.0;
    for w in cuts.windows(2) {
        let p = gk21(&mut f, w[0], w[1]);
        evaluations += 21;
        total += p.value;
        total_err += p.error;
        heap.push(p);
    }
    loop {
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite integrand on [{a}, {b}]"
            )));
        }
        let target = tol.absolute.max(tol.relative * total.abs());
        if total_err <= target {
            break;
        }
        if heap.len() >= tol.max_panels {
            return Err(Error::Quadrature {
                value: total,
                error: total_err,
            });
        }
        let worst = heap.pop().expect("at least one panel");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Panel collapsed to adjacent floats; accept what we have.
            heap.push(worst);
            return Err(Error::Quadrature {
                value: total,
                error: total_err,
            });
        }
        let left = gk21(&mut f, worst.a, mid);
        let right = gk21(&mut f, mid, worst.b);
        evaluations += 42;
        total += left.value + right.value - worst.value;
        total_err += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
    }
    // Re-sum to shed the drift from incremental updates.
    let value: f64 = heap.iter().map(|p| p.value).sum();
    let error: f64 = heap.iter().map(|p| p.error).sum();
    Ok(Integral {
        value,
        error,
        evaluations,
    })
}

/// Standardized latent law of `s = (ξ − η)/σ`.
#[derive(Debug, Clone, Copy)]
pub enum LatentLaw {
    Normal,
    StudentT { nu: f64 },
}

impl LatentLaw {
    /// Returns a closure-friendly log-density evaluator with its constant
    /// precomputed.
    pub fn log_density(self) -> impl Fn(f64) -> f64 + Copy {
        let (nu, c) = match self {
            LatentLaw::Normal => (f64::INFINITY, -0.5 * (2.0 * std::f64::consts::PI).ln()),
            LatentLaw::StudentT { nu } => (
                nu,
                ln_gamma(0.5 * (nu + 1.0))
                    - ln_gamma(0.5 * nu)
                    - 0.5 * (nu * std::f64::consts::PI).ln(),
            ),
        };
        move |s: f64| {
            if nu.is_infinite() {
                c - 0.5 * s * s
            } else {
                c - 0.5 * (nu + 1.0) * (s * s / nu).ln_1p()
            }
        }
    }

    /// `ln P(S > x)` for `x ≥ 0`.
    pub fn ln_upper_tail(self, x: f64) -> f64 {
        match self {
            LatentLaw::Normal => (0.5 * erfc(x / std::f64::consts::SQRT_2)).ln(),
            LatentLaw::StudentT { nu } => {
                let z = nu / (nu + x * x);
                (0.5 * beta_reg(0.5 * nu, 0.5, z)).ln()
            }
        }
    }
}

/// Settings for [`integrate_latent`].
#[derive(Debug, Clone, Copy)]
pub struct LatentQuadrature {
    pub initial_half_width: f64,
    pub tail_tolerance: f64,
    pub relative_tolerance: f64,
    pub max_doublings: usize,
}

impl Default for LatentQuadrature {
    fn default() -> Self {
        Self {
            initial_half_width: 20.0,
            tail_tolerance: 1e-12,
            relative_tolerance: 1e-10,
            max_doublings: 64,
        }
    }
}

/// Log-kernel description for [`integrate_latent`].
///
/// `log_kernel` must be non-decreasing below `mode` and non-increasing above
/// it (`mode` may be infinite); that shape is what makes the tail bound valid.
/// `scales` lists widths (on the ξ scale) of features near the mode that the
/// initial panel layout should resolve.
pub struct Kernel<'a, K: Fn(f64) -> f64> {
    pub log_kernel: K,
    pub mode: f64,
    pub anchor: f64,
    pub scales: &'a [f64],
}

/// Computes `ln ∫ exp(log_kernel(ξ)) · f(ξ | η, σ) dξ`, where `f` is the
/// location-scale density of `law`.
pub fn integrate_latent<K: Fn(f64) -> f64>(
    kernel: &Kernel<'_, K>,
    eta: f64,
    sigma: f64,
    law: LatentLaw,
    settings: &LatentQuadrature,
) -> Result<f64> {
    let log_density = law.log_density();
    let lk = &kernel.log_kernel;
    let log_integrand = |s: f64| lk(eta + sigma * s) + log_density(s);

    let l0 = settings.initial_half_width;
    let to_s = |xi: f64| (xi - eta) / sigma;
    let mut breaks = vec![-0.5 * l0, -0.25 * l0, 0.0, 0.25 * l0, 0.5 * l0];
    let anchor = to_s(kernel.anchor);
    if anchor.is_finite() {
        breaks.push(anchor);
        for &w in kernel.scales {
            let ws = w / sigma;
            for mult in [1.0, 2.0, 4.0, 8.0] {
                breaks.push(anchor - mult * ws);
                breaks.push(anchor + mult * ws);
            }
        }
    }

    // Reference level so the integrand stays O(1) near its peak.
    let reference = breaks
        .iter()
        .map(|&s| log_integrand(s.clamp(-l0, l0)))
        .fold(f64::NEG_INFINITY, f64::max);
    if !reference.is_finite() {
        return Err(Error::Numerical(format!(
            "latent integrand not finite near its peak (eta {eta}, sigma {sigma})"
        )));
    }
    let scaled = |s: f64| (log_integrand(s) - reference).exp();
    let tol = Tolerance {
        relative: settings.relative_tolerance,
        absolute: 0.0,
        max_panels: 2000,
    };

    let core = integrate(scaled, -l0, l0, &breaks, tol)?;
    let mut total = core.value;
    let mut error = core.error;

    // On a tail beyond `edge_xi` the kernel is monotone except across the
    // mode, so it lies between its value at the edge, its limit at infinity
    // and its value at the mode.
    let ln_kernel_range = |edge_xi: f64, lower: bool| -> (f64, f64) {
        let (limit, beyond) = if lower {
            (lk(f64::NEG_INFINITY), kernel.mode <= edge_xi)
        } else {
            (lk(f64::INFINITY), kernel.mode >= edge_xi)
        };
        let at_edge = lk(edge_xi);
        let hi = if beyond { lk(kernel.mode) } else { at_edge };
        let lo = if limit.is_nan() { f64::NEG_INFINITY } else { limit.min(at_edge) };
        (lo, hi)
    };

    let mut half = l0;
    for _ in 0..=settings.max_doublings {
        let ln_tail = law.ln_upper_tail(half);
        let (lo_min, lo_max) = ln_kernel_range(eta - sigma * half, true);
        let (hi_min, hi_max) = ln_kernel_range(eta + sigma * half, false);
        let upper = (lo_max + ln_tail - reference).exp() + (hi_max + ln_tail - reference).exp();
        let lower = (lo_min + ln_tail - reference).exp() + (hi_min + ln_tail - reference).exp();
        if upper <= settings.tail_tolerance * total {
            return Ok(reference + total.ln());
        }
        // Heavy tails under a kernel that levels off: add the bracketed
        // remainder at its midpoint once the bracket is tight.
        if 0.5 * (upper - lower) <= settings.tail_tolerance * (total + lower) {
            return Ok(reference + (total + 0.5 * (upper + lower)).ln());
        }
        let next = 2.0 * half;
        let left = integrate(scaled, -next, -half, &[], tol)?;
        let right = integrate(scaled, half, next, &[], tol)?;
        total += left.value + right.value;
        error += left.error + right.error;
        half = next;
    }
    Err(Error::Quadrature {
        value: reference + total.ln(),
        error: error / total,
    })
}
