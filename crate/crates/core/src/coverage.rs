//! Next-state coverage probabilities under Gaussian system noise.
//!
//! Two notions of "the learned policy's next state is covered by N expert
//! next states sampled from the same state":
//!
//! - **tolerance coverage** `P_S`: some expert sample lies within `epsilon`
//!   (max-norm) of the policy sample. Closed form
//!   `1 - (1 - erf(ε / 2σ)^d)^N`.
//! - **ball coverage** `P_B`: the policy sample lies inside the max-norm ball
//!   around the expert sample mean that just contains every expert sample.
//!   Closed form `(1 - q^{N d})^d` with
//!   `q = (2/σ_π) ∫₀^∞ f(x/σ_π) erf(x / (√2 σ_πE)) dx`,
//!   `σ_πE = sqrt(1 + 1/N) σ_s` and `σ_π = sqrt(σ_πE² + α² σ_p²)`.
//!
//! Both closed forms are products of per-comparison probabilities. The
//! Monte-Carlo estimators [`mc_coverage_s`] and [`mc_coverage_b`] simulate the
//! events directly and make no such factorisation, so for `N > 1` they are
//! the reference values. [`p_s_coverage_exact`] integrates the tolerance
//! event over the shared policy sample and agrees with the simulation.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;
use crate::rng::{self, Rng};
use crate::stats::binomial_std_error;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageParamsS {
    /// System-noise standard deviation.
    pub sigma: f64,
    /// Max-norm coverage tolerance.
    pub epsilon: f64,
    /// Number of expert next-state samples.
    pub n: usize,
    /// State dimension.
    pub d: usize,
}

impl CoverageParamsS {
    pub fn new(sigma: f64, epsilon: f64, n: usize, d: usize) -> Result<Self> {
        let p = Self { sigma, epsilon, n, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::argument(format!("sigma must be positive, got {}", self.sigma)));
        }
        // epsilon = 0 is admitted as the degenerate zero-probability case.
        if !(self.epsilon >= 0.0) {
            return Err(Error::argument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.n == 0 || self.d == 0 {
            return Err(Error::argument("n and d must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageParamsB {
    /// System noise of the dynamics.
    pub sigma_s: f64,
    /// Gaussian noise of the learned policy.
    pub sigma_p: f64,
    /// Action gain of the linear dynamics `s' = s + alpha * a + noise`.
    pub alpha: f64,
    pub n: usize,
    pub d: usize,
}

impl CoverageParamsB {
    pub fn new(sigma_s: f64, sigma_p: f64, alpha: f64, n: usize, d: usize) -> Result<Self> {
        let p = Self {
            sigma_s,
            sigma_p,
            alpha,
            n,
            d,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::argument(format!(
                "sigma_s must be positive, got {}",
                self.sigma_s
            )));
        }
        if !(self.sigma_p >= 0.0 && self.sigma_p.is_finite()) {
            return Err(Error::argument(format!("sigma_p must be >= 0, got {}", self.sigma_p)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::argument("alpha must be finite"));
        }
        if self.n == 0 || self.d == 0 {
            return Err(Error::argument("n and d must be at least 1"));
        }
        Ok(())
    }

    /// `sqrt(1 + 1/N) * sigma_s`.
    pub fn sigma_pi_e(&self) -> f64 {
        (1.0 + 1.0 / self.n as f64).sqrt() * self.sigma_s
    }

    /// `sqrt(sigma_pi_e² + alpha² sigma_p²)`.
    pub fn sigma_pi(&self) -> f64 {
        let e = self.sigma_pi_e();
        (e * e + self.alpha * self.alpha * self.sigma_p * self.sigma_p).sqrt()
    }
}

/// `(1 - u)^n` computed as `exp(n * ln(1 - u))`, accurate for tiny `u`.
fn one_minus_pow(u: f64, n: f64) -> f64 {
    if u >= 1.0 {
        return if n > 0.0 { 0.0 } else { 1.0 };
    }
    (n * (-u).ln_1p()).exp()
}

/// Closed-form tolerance coverage `1 - (1 - erf(ε / 2σ)^d)^N`.
pub fn p_s_coverage(params: &CoverageParamsS) -> Result<f64> {
    params.validate()?;
    let x = params.epsilon / (2.0 * params.sigma);
    // erf(x)^d = exp(d ln(1 - erfc(x))), and 1 - erf^d = -expm1(...): keeps
    // precision when erf(x) is within rounding of one.
    let ln_erf = (-erfc(x)).ln_1p();
    let miss_one = -(params.d as f64 * ln_erf).exp_m1();
    let miss_all = if miss_one <= 0.0 {
        0.0
    } else {
        (params.n as f64 * miss_one.ln()).exp()
    };
    Ok((1.0 - miss_all).clamp(0.0, 1.0))
}

const MAX_EXACT_DIM: usize = 3;

/// Probability of the tolerance-coverage event, integrated exactly over the
/// shared policy sample instead of treating the N comparisons as independent.
///
/// With `z` the standardised policy sample, one expert sample covers
/// coordinate `j` with probability `g(z_j) = Φ(z_j + r) - Φ(z_j - r)`,
/// `r = ε/σ`, so `P = 1 - E_z[(1 - Π_j g(z_j))^N]`. Supported for `d <= 3`.
pub fn p_s_coverage_exact(params: &CoverageParamsS) -> Result<f64> {
    params.validate()?;
    if params.d > MAX_EXACT_DIM {
        return Err(Error::argument(format!(
            "exact tolerance coverage supports d <= {MAX_EXACT_DIM}, got {}",
            params.d
        )));
    }
    if params.epsilon == 0.0 {
        return Ok(0.0);
    }
    let r = params.epsilon / params.sigma;
    let n = params.n as f64;
    // ln g(z), via the miss probability Φ(z - r) + Φ(-z - r) for accuracy near 1.
    let ln_g = move |z: f64| (-(normal_cdf(z - r) + normal_cdf(-z - r)).min(1.0)).ln_1p();
    let miss_all = move |sum_ln_g: f64| {
        let miss_one = -sum_ln_g.exp_m1();
        if miss_one <= 0.0 {
            0.0
        } else {
            (n * miss_one.ln()).exp()
        }
    };
    // g is even in z, so integrate each coordinate over [0, 12] with weight 2φ.
    const Z_MAX: f64 = 12.0;
    let quad = |f: &dyn Fn(f64) -> f64| -> Result<f64> {
        Ok(quadrature::integrate(|z| 2.0 * normal_pdf(z) * f(z), 0.0, Z_MAX, 1e-12, 1e-12, 2000)?.value)
    };
    let expectation = match params.d {
        1 => quad(&|z| miss_all(ln_g(z)))?,
        2 => quad(&|z1| {
            let l1 = ln_g(z1);
            quad(&|z2| miss_all(l1 + ln_g(z2))).unwrap_or(f64::NAN)
        })?,
        _ => quad(&|z1| {
            let l1 = ln_g(z1);
            quad(&|z2| {
                let l2 = l1 + ln_g(z2);
                quad(&|z3| miss_all(l2 + ln_g(z3))).unwrap_or(f64::NAN)
            })
            .unwrap_or(f64::NAN)
        })?,
    };
    if !expectation.is_finite() {
        return Err(Error::Numerical {
            message: "inner quadrature of exact tolerance coverage failed".into(),
            achieved: f64::NAN,
        });
    }
    Ok((1.0 - expectation).clamp(0.0, 1.0))
}

/// Absolute tolerance of the inner ball-coverage integral.
pub const INNER_INTEGRAL_TOL: f64 = 1e-10;
// Standardised upper limit: the neglected tail 2∫_{10}^∞ φ is below 1e-20.
const INNER_UPPER: f64 = 10.0;

/// Inner integral `q = (2/σ_π) ∫₀^∞ f(x/σ_π) erf(x / (√2 σ_πE)) dx`.
///
/// This is `P(|A| >= |B|)` for independent `A ~ N(0, σ_π²)` and `B ~ N(0, σ_πE²)`.
pub fn ball_inner_integral(sigma_pi_e: f64, sigma_pi: f64) -> Result<f64> {
    if !(sigma_pi_e > 0.0 && sigma_pi > 0.0) {
        return Err(Error::argument("standard deviations must be positive"));
    }
    // Substituting u = x / σ_π puts the integrand on a fixed scale.
    let ratio = sigma_pi / (SQRT_2 * sigma_pi_e);
    let r = quadrature::integrate(
        |u| 2.0 * normal_pdf(u) * erf(u * ratio),
        0.0,
        INNER_UPPER,
        INNER_INTEGRAL_TOL,
        0.0,
        500,
    )?;
    Ok(r.value.clamp(0.0, 1.0))
}

/// Closed-form ball coverage `(1 - q^{N d})^d`.
pub fn p_b_coverage(params: &CoverageParamsB) -> Result<f64> {
    params.validate()?;
    let q = ball_inner_integral(params.sigma_pi_e(), params.sigma_pi())?;
    let nd = (params.n * params.d) as f64;
    // q^{Nd} in log space; q = 0 only if the policy never beats an expert sample.
    let q_pow = if q <= 0.0 { 0.0 } else { (nd * q.ln()).exp() };
    Ok(one_minus_pow(q_pow, params.d as f64).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub trials: usize,
}

impl fmt::Display for McEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6} ± {:.6} ({} trials)",
            self.estimate, self.std_error, self.trials
        )
    }
}

/// Trials per independently seeded batch.
pub const MC_BATCH: usize = 4096;

/// Run `trials` Bernoulli trials in fixed batches; batch `b` draws from
/// `derive_seed(seed, [b])`, so the estimate does not depend on scheduling.
fn run_batched<F>(trials: usize, seed: u64, trial: F) -> Result<McEstimate>
where
    F: Fn(&mut Rng, &mut Vec<f64>) -> bool + Sync,
{
    if trials == 0 {
        return Err(Error::argument("trials must be at least 1"));
    }
    let n_batches = trials.div_ceil(MC_BATCH);
    let hits: usize = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::seeded(rng::derive_seed(seed, &[b as u64]));
            let mut scratch = Vec::new();
            let count = MC_BATCH.min(trials - b * MC_BATCH);
            (0..count).filter(|_| trial(&mut rng, &mut scratch)).count()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let p = hits as f64 / trials as f64;
    Ok(McEstimate {
        estimate: p,
        std_error: binomial_std_error(p, trials),
        trials,
    })
}

/// Simulate the tolerance-coverage event: N expert next states and one policy
/// next state, all `N(0, σ² I)`; covered if some expert sample is within
/// `epsilon` in max-norm.
pub fn mc_coverage_s(params: &CoverageParamsS, trials: usize, seed: u64) -> Result<McEstimate> {
    params.validate()?;
    let CoverageParamsS { sigma, epsilon, n, d } = *params;
    run_batched(trials, seed, |rng, policy| {
        policy.clear();
        policy.extend((0..d).map(|_| sigma * rng::normal(rng)));
        let mut covered = false;
        for _ in 0..n {
            let mut dist = 0.0f64;
            for p in policy.iter() {
                let e = sigma * rng::normal(rng);
                dist = dist.max((p - e).abs());
            }
            covered |= dist <= epsilon;
        }
        covered
    })
}

/// Simulate the ball-coverage event: N expert next states `N(0, σ_s² I)`, one
/// policy next state `N(0, (σ_s² + α² σ_p²) I)`; covered if the policy sample
/// is no farther (max-norm) from the expert mean than the farthest expert sample.
pub fn mc_coverage_b(params: &CoverageParamsB, trials: usize, seed: u64) -> Result<McEstimate> {
    params.validate()?;
    let CoverageParamsB {
        sigma_s,
        sigma_p,
        alpha,
        n,
        d,
    } = *params;
    let sigma_policy = (sigma_s * sigma_s + alpha * alpha * sigma_p * sigma_p).sqrt();
    run_batched(trials, seed, |rng, expert| {
        expert.clear();
        expert.extend((0..n * d).map(|_| sigma_s * rng::normal(rng)));
        let mut radius = 0.0f64;
        let mut policy_dist = 0.0f64;
        for k in 0..d {
            let center = (0..n).map(|i| expert[i * d + k]).sum::<f64>() / n as f64;
            for i in 0..n {
                radius = radius.max((expert[i * d + k] - center).abs());
            }
            let s = sigma_policy * rng::normal(rng);
            policy_dist = policy_dist.max((s - center).abs());
        }
        policy_dist <= radius
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Panel {
    /// Tolerance coverage against σ for several N.
    Ps,
    /// Ball coverage against σ_s for several policy-noise levels.
    Pb,
}

impl fmt::Display for Panel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Panel::Ps => "ps",
            Panel::Pb => "pb",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsPanel {
    pub epsilon: f64,
    pub d: usize,
    pub ns: Vec<usize>,
    pub sigmas: Vec<f64>,
}

impl Default for PsPanel {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            d: 1,
            ns: vec![1, 10, 100, 1000],
            sigmas: linspace(0.01, 0.5, 50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PbPanel {
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    /// Reference policy noise; series use `multiplier * sigma_p_base`.
    pub sigma_p_base: f64,
    pub multipliers: Vec<f64>,
    pub sigma_s: Vec<f64>,
}

impl Default for PbPanel {
    fn default() -> Self {
        Self {
            n: 10,
            d: 1,
            alpha: 1.0,
            sigma_p_base: 0.05,
            multipliers: vec![1.0, 2.0, 3.0],
            sigma_s: linspace(0.01, 0.5, 50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveSpec {
    pub ps: Option<PsPanel>,
    pub pb: Option<PbPanel>,
}

impl CurveSpec {
    pub fn both() -> Self {
        Self {
            ps: Some(PsPanel::default()),
            pb: Some(PbPanel::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub panel: Panel,
    pub x_sigma: f64,
    pub series: String,
    pub value: f64,
}

/// `n` evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn ps_series_label(n: usize) -> String {
    format!("N={n}")
}

pub fn pb_series_label(multiplier: f64) -> String {
    format!("sigma_p={multiplier}x")
}

/// Evaluate both coverage panels on their grids. Each row equals the
/// corresponding scalar [`p_s_coverage`] / [`p_b_coverage`] value.
pub fn emit_coverage_curves(spec: &CurveSpec) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    if let Some(ps) = &spec.ps {
        if ps.ns.is_empty() || ps.sigmas.is_empty() {
            return Err(Error::argument("P_S panel needs nonempty N and sigma grids"));
        }
        for &n in &ps.ns {
            for &sigma in &ps.sigmas {
                let value = p_s_coverage(&CoverageParamsS::new(sigma, ps.epsilon, n, ps.d)?)?;
                rows.push(CurveRow {
                    panel: Panel::Ps,
                    x_sigma: sigma,
                    series: ps_series_label(n),
                    value,
                });
            }
        }
    }
    if let Some(pb) = &spec.pb {
        if pb.multipliers.is_empty() || pb.sigma_s.is_empty() {
            return Err(Error::argument("P_B panel needs nonempty multiplier and sigma_s grids"));
        }
        for &m in &pb.multipliers {
            for &sigma_s in &pb.sigma_s {
                let params = CoverageParamsB::new(sigma_s, m * pb.sigma_p_base, pb.alpha, pb.n, pb.d)?;
                rows.push(CurveRow {
                    panel: Panel::Pb,
                    x_sigma: sigma_s,
                    series: pb_series_label(m),
                    value: p_b_coverage(&params)?,
                });
            }
        }
    }
    Ok(rows)
}

pub const CURVE_HEADER: &str = "panel,x_sigma,series,value";

/// 17 significant digits, enough to round-trip any f64.
pub fn format_sig17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_curves_csv(rows: &[CurveRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.panel,
            format_sig17(r.x_sigma),
            r.series,
            format_sig17(r.value)
        )?;
    }
    Ok(())
}
