//! Local-unimodality bounds for Gaussian-mixture targets and the numerical
//! oracles used to check them.
//!
//! Notation: `k*` is the component whose scaled mean `t mu_j` is nearest to
//! `x`, `D_t(x)` that distance, `rho_t(x)` the margin to the second nearest,
//! `C_pi = 1/pi_{k*} - 1`, and `B_min`, `B_max` the extreme path variances
//! `B_t(j)` over components.
//!
//! Bounds are returned as computed. A value of 1 or more is flagged
//! `vacuous` rather than clamped.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::divergence::{knn_kl, KLEstimate};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{
    b_of, isotropic_log_density, log_sum_exp, GaussianMixtureTarget, MixtureComponent, Schedule, Target,
};
use crate::posterior::{
    log_responsibilities_into, mixture_posterior, nearest_mode, NearestModeInfo, UnimodalPosterior,
};
use crate::recursion::fmt_f64;
use crate::rng::{aux_rng, fill_standard_normal};
use crate::samplers::{run_sampler, SamplerKind};

/// Relative tolerance for "equal variances".
pub const EQUAL_VARIANCE_RTOL: f64 = 1e-9;
/// Stop refining the TV grid once successive values differ by less than this.
pub const TV_REFINE_TOL: f64 = 1e-4;
/// Grid half-width in posterior standard deviations.
pub const TV_GRID_HALF_WIDTH: f64 = 8.0;
/// Coarsest grid spacing as a fraction of the posterior standard deviation.
pub const TV_GRID_SPACING: f64 = 1.0 / 20.0;

const TV_MAX_REFINE: u32 = 5;
const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundValue {
    pub value: f64,
    pub vacuous: bool,
}

impl BoundValue {
    fn new(value: f64) -> Self {
        Self { value, vacuous: !(value < 1.0) }
    }

    /// `min(1, value)`, the bound as a probability.
    pub fn capped(&self) -> f64 {
        self.value.min(1.0)
    }
}

fn check_open_time(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("time {t} outside (0, 1]")))
    }
}

fn b_extremes(target: &GaussianMixtureTarget, t: f64) -> (f64, f64) {
    target.path_variances(t).into_iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), b| (lo.min(b), hi.max(b)))
}

fn equal_variances(target: &GaussianMixtureTarget) -> bool {
    let s: Vec<f64> = target.components().iter().map(|c| c.sigma * c.sigma).collect();
    let hi = s.iter().copied().fold(0.0, f64::max);
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo <= EQUAL_VARIANCE_RTOL * hi
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TVBoundReport {
    pub bound_value: f64,
    pub vacuous: bool,
    pub c_pi: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub nearest: NearestModeInfo,
    pub brute_force_tv: Option<f64>,
}

/// Upper bound on `TV(p(V | x), p(V | x, Z = k*))`:
///
/// ```text
/// C_pi (B_max / B_min)^{d/2} exp(D^2/2 (1/B_min - 1/B_max) - rho^2 / (2 B_max))
/// ```
pub fn tv_bound(target: &GaussianMixtureTarget, t: f64, x: &[f64]) -> Result<TVBoundReport> {
    check_dim(target.dim(), x.len())?;
    check_open_time(t)?;
    if target.len() < 2 {
        return Err(Error::precondition("TV bound needs K >= 2; with one component the TV is 0"));
    }
    let nearest = nearest_mode(target, t, x)?;
    let (b_min, b_max) = b_extremes(target, t);
    let c_pi = 1.0 / target.component(nearest.k_star).weight - 1.0;
    let d = x.len() as f64;
    let dist = nearest.distance;
    let rho = nearest.margin;
    let log_b = c_pi.ln() + 0.5 * d * (b_max / b_min).ln() + 0.5 * dist * dist * (1.0 / b_min - 1.0 / b_max)
        - rho * rho / (2.0 * b_max);
    let bound = log_b.exp();
    Ok(TVBoundReport { bound_value: bound, vacuous: !(bound < 1.0), c_pi, b_min, b_max, nearest, brute_force_tv: None })
}

/// Trapezoid nodes and weights on one axis: the union of uniform grids over
/// `[c - 8 s, c + 8 s]` with spacing `s h` for every `(c, s)`.
fn axis_rule(spans: &[(f64, f64)], h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut pts = Vec::new();
    for &(c, s) in spans {
        let n = (2.0 * TV_GRID_HALF_WIDTH / h).round() as usize;
        let step = s * h;
        let lo = c - TV_GRID_HALF_WIDTH * s;
        pts.extend((0..=n).map(|i| lo + i as f64 * step));
    }
    pts.sort_by(f64::total_cmp);
    let min_gap = spans.iter().map(|s| s.1).fold(f64::INFINITY, f64::min) * h * 1e-6;
    pts.dedup_by(|a, b| (*a - *b).abs() < min_gap);
    let n = pts.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let half = 0.5 * (pts[i + 1] - pts[i]);
        w[i] += half;
        w[i + 1] += half;
    }
    (pts, w)
}

fn normal_pdf_1d(v: f64, m: f64, var: f64) -> f64 {
    (-(v - m) * (v - m) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn tv_on_grid(mix: &[(f64, &UnimodalPosterior)], single: &UnimodalPosterior, h: f64) -> f64 {
    let d = single.mean.len();
    let mut laws: Vec<(f64, &UnimodalPosterior)> = mix.to_vec();
    laws.push((-1.0, single));
    let rules: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
        .map(|a| {
            let spans: Vec<(f64, f64)> = laws.iter().map(|(_, p)| (p.mean[a], p.tau2.sqrt())).collect();
            axis_rule(&spans, h)
        })
        .collect();
    // per-law, per-axis density tables; the signed weight makes the sum p - q
    let tables: Vec<Vec<Vec<f64>>> = laws
        .iter()
        .map(|(_, p)| {
            (0..d).map(|a| rules[a].0.iter().map(|&v| normal_pdf_1d(v, p.mean[a], p.tau2)).collect()).collect()
        })
        .collect();
    let signed: Vec<f64> = laws.iter().map(|l| l.0).collect();
    let total = if d == 1 {
        (0..rules[0].0.len())
            .map(|i| {
                let diff: f64 = signed.iter().zip(&tables).map(|(w, tb)| w * tb[0][i]).sum();
                rules[0].1[i] * diff.abs()
            })
            .sum::<f64>()
    } else {
        let ny = rules[1].0.len();
        (0..rules[0].0.len())
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..ny {
                    let diff: f64 = signed.iter().zip(&tables).map(|(w, tb)| w * tb[0][i] * tb[1][j]).sum();
                    acc += rules[1].1[j] * diff.abs();
                }
                rules[0].1[i] * acc
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum::<f64>()
    };
    0.5 * total
}

/// Grid TV between a weighted mixture of isotropic Gaussians and a single
/// isotropic Gaussian, for `d <= 2`. Refines until two successive grids agree
/// to [`TV_REFINE_TOL`].
pub fn brute_force_tv_laws(mix: &[(f64, UnimodalPosterior)], single: &UnimodalPosterior) -> Result<f64> {
    let d = single.mean.len();
    if d == 0 || d > 2 {
        return Err(Error::precondition(format!("grid TV supports d <= 2, got d = {d}")));
    }
    for (w, p) in mix {
        check_dim(d, p.mean.len())?;
        if !(p.tau2 > 0.0) || !(*w >= 0.0) {
            return Err(Error::domain("grid TV needs positive variances and nonnegative weights"));
        }
    }
    if !(single.tau2 > 0.0) {
        return Err(Error::domain("grid TV needs positive variances"));
    }
    let active: Vec<(f64, &UnimodalPosterior)> = mix.iter().filter(|(w, _)| *w > 0.0).map(|(w, p)| (*w, p)).collect();
    let mut h = TV_GRID_SPACING;
    let mut prev = tv_on_grid(&active, single, h);
    for _ in 0..TV_MAX_REFINE {
        h *= 0.5;
        let next = tv_on_grid(&active, single, h);
        if (next - prev).abs() < TV_REFINE_TOL {
            return Ok(next.clamp(0.0, 1.0));
        }
        prev = next;
    }
    Err(Error::Estimator("grid TV did not converge".into()))
}

/// `TV(p(V | X_t = x), p(V | X_t = x, Z = k*))` by grid quadrature, `d <= 2`.
pub fn brute_force_tv(target: &GaussianMixtureTarget, t: f64, x: &[f64]) -> Result<f64> {
    check_dim(target.dim(), x.len())?;
    if target.dim() > 2 {
        return Err(Error::precondition(format!("grid TV supports d <= 2, got d = {}", target.dim())));
    }
    if target.len() == 1 {
        return Ok(0.0);
    }
    let post = mixture_posterior(target, t, x)?;
    let k = nearest_mode(target, t, x)?.k_star;
    let mix: Vec<(f64, UnimodalPosterior)> =
        post.responsibilities().iter().copied().zip(post.components().iter().cloned()).collect();
    brute_force_tv_laws(&mix, &post.components()[k])
}

/// Simplified bound `C_pi exp(2 - t^2 D_min^2 / (4 B_max))` on the neighbourhood
/// `D_t(x) <= sqrt(B_min)`, for equal component variances.
pub fn equal_variance_tv_bound(target: &GaussianMixtureTarget, t: f64, x: &[f64]) -> Result<f64> {
    check_dim(target.dim(), x.len())?;
    check_open_time(t)?;
    if target.len() < 2 {
        return Err(Error::precondition("bound needs K >= 2"));
    }
    if !equal_variances(target) {
        return Err(Error::precondition("bound needs equal component variances (B_max = B_min)"));
    }
    let (b_min, b_max) = b_extremes(target, t);
    let nearest = nearest_mode(target, t, x)?;
    if nearest.distance > b_min.sqrt() {
        return Err(Error::precondition(format!(
            "x outside the neighbourhood: D_t(x) = {} > sqrt(B_min) = {}",
            nearest.distance,
            b_min.sqrt()
        )));
    }
    let d_min = target.min_separation().unwrap_or(f64::INFINITY);
    let c_pi = 1.0 / target.component(nearest.k_star).weight - 1.0;
    Ok(c_pi * (2.0 - t * t * d_min * d_min / (4.0 * b_max)).exp())
}

/// Good region `G_t(r, rho*) = {x : D_t(x) <= r, rho_t(x) >= rho*}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GoodRegionSpec {
    pub t: f64,
    pub r: f64,
    pub rho_star: f64,
    /// Set when built from `r = beta t D_min`, `rho* = t D_min - 2 r`.
    pub beta: Option<f64>,
}

impl GoodRegionSpec {
    pub fn new(t: f64, r: f64, rho_star: f64) -> Result<Self> {
        if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
            return Err(Error::domain(format!("time {t} outside [0, 1]")));
        }
        if !(r >= 0.0 && rho_star >= 0.0 && r.is_finite() && rho_star.is_finite()) {
            return Err(Error::domain("good region needs finite r >= 0 and rho* >= 0"));
        }
        Ok(Self { t, r, rho_star, beta: None })
    }

    /// `r = beta t D_min`, `rho* = (1 - 2 beta) t D_min` for `beta` in `(0, 1/2)`.
    pub fn from_beta(t: f64, d_min: f64, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 0.5) {
            return Err(Error::domain(format!("beta must lie in (0, 1/2), got {beta}")));
        }
        if !(d_min > 0.0 && d_min.is_finite()) {
            return Err(Error::domain("D_min must be positive and finite"));
        }
        let scale = t * d_min;
        let r = beta * scale;
        let mut spec = Self::new(t, r, scale - 2.0 * r)?;
        spec.beta = Some(beta);
        Ok(spec)
    }

    /// Same `(r, rho*)` at another time.
    pub fn at_time(&self, t: f64) -> Self {
        Self { t, ..*self }
    }
}

pub fn good_region_membership(
    target: &GaussianMixtureTarget,
    spec: &GoodRegionSpec,
    x: &[f64],
) -> Result<(bool, NearestModeInfo)> {
    let info = nearest_mode(target, spec.t, x)?;
    Ok((info.distance <= spec.r && info.margin >= spec.rho_star, info))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EscapeBound {
    /// `exp(-r^2 / (2 B_min)) + exp(-(t D_min - rho*)^2 / (8 B_min))`.
    pub bound: BoundValue,
    /// The same expression with `B_max` in place of `B_min`.
    pub with_b_max: BoundValue,
}

/// Bound on `P(X_t not in G_t(r, rho*))`.
pub fn good_region_escape_bound(target: &GaussianMixtureTarget, spec: &GoodRegionSpec) -> Result<EscapeBound> {
    let t = spec.t;
    let d_min = target.min_separation().unwrap_or(f64::INFINITY);
    let gap = t * d_min - spec.rho_star;
    if gap < 0.0 {
        return Err(Error::precondition(format!("rho* = {} exceeds t D_min = {}", spec.rho_star, t * d_min)));
    }
    let (b_min, b_max) = b_extremes(target, t);
    let f = |b: f64| {
        let second = if gap.is_infinite() { 0.0 } else { (-gap * gap / (8.0 * b)).exp() };
        (-spec.r * spec.r / (2.0 * b)).exp() + second
    };
    Ok(EscapeBound { bound: BoundValue::new(f(b_min)), with_b_max: BoundValue::new(f(b_max)) })
}

/// Monte Carlo frequency with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McFrequency {
    pub hits: usize,
    pub trials: usize,
    pub frequency: f64,
    pub std_error: f64,
}

impl McFrequency {
    pub fn new(hits: usize, trials: usize) -> Self {
        let p = if trials == 0 { 0.0 } else { hits as f64 / trials as f64 };
        let se = if trials == 0 { 0.0 } else { (p * (1.0 - p) / trials as f64).sqrt() };
        Self { hits, trials, frequency: p, std_error: se }
    }
}

/// Draws of `X_t = (1 - t) X0 + t X1` with `X0 ~ N(0, I)`, `X1 ~ p1`.
pub fn sample_path_marginal(target: &GaussianMixtureTarget, t: f64, m: usize, seed: u64) -> Vec<f64> {
    let d = target.dim();
    let mut out = vec![0.0; m * d];
    out.par_chunks_mut(MC_CHUNK * d).enumerate().for_each(|(c, chunk)| {
        let mut rng = aux_rng(seed, c as u64);
        let mut x0 = vec![0.0; d];
        let mut z = vec![0.0; d];
        for x in chunk.chunks_exact_mut(d) {
            let j = pick_component(target, rng.random());
            let comp = target.component(j);
            fill_standard_normal(&mut rng, &mut x0);
            fill_standard_normal(&mut rng, &mut z);
            for i in 0..d {
                x[i] = (1.0 - t) * x0[i] + t * (comp.mean[i] + comp.sigma * z[i]);
            }
        }
    });
    out
}

fn pick_component(target: &GaussianMixtureTarget, u: f64) -> usize {
    let mut acc = 0.0;
    for (j, c) in target.components().iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return j;
        }
    }
    target.len() - 1
}

/// Monte Carlo estimate of `P(X_t not in G_t(r, rho*))`.
pub fn escape_frequency(
    target: &GaussianMixtureTarget,
    spec: &GoodRegionSpec,
    m: usize,
    seed: u64,
) -> Result<McFrequency> {
    let d = target.dim();
    let xs = sample_path_marginal(target, spec.t, m, seed);
    let outside = xs
        .par_chunks_exact(d)
        .map(|x| good_region_membership(target, spec, x).map(|(inside, _)| usize::from(!inside)))
        .sum::<Result<usize>>()?;
    Ok(McFrequency::new(outside, m))
}

/// `delta = (N - M + 1) exp(-(r / sqrt(B*) - sqrt(d))_+^2 / 2)` with
/// `B* = (1 - t_M)^2 + sigma_max^2`.
pub fn attraction_failure_bound(
    target: &GaussianMixtureTarget,
    spec: &GoodRegionSpec,
    n_outer: usize,
    hit_step: usize,
) -> Result<BoundValue> {
    if hit_step >= n_outer {
        return Err(Error::precondition(format!("hitting step M = {hit_step} must be below N = {n_outer}")));
    }
    let t_m = hit_step as f64 / n_outer as f64;
    let s = target.sigma_max();
    let b_star = (1.0 - t_m).powi(2) + s * s;
    let excess = (spec.r / b_star.sqrt() - (target.dim() as f64).sqrt()).max(0.0);
    Ok(BoundValue::new((n_outer - hit_step + 1) as f64 * (-0.5 * excess * excess).exp()))
}

/// Outcome of conditioning sampler trajectories on the good region at step `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttractionMc {
    /// Fraction of trajectories inside `G_{t_M}` at step `M`.
    pub retention: f64,
    /// Among retained trajectories, those that leave `G_{t_m}(r, rho*)` or
    /// switch nearest mode at some `m >= M`.
    pub escapes: McFrequency,
}

/// Rejection estimate of the failure probability bounded by
/// [`attraction_failure_bound`].
pub fn attraction_escape_frequency(
    target: &GaussianMixtureTarget,
    kind: SamplerKind,
    schedule: &Schedule,
    spec: &GoodRegionSpec,
    hit_step: usize,
    m: usize,
    seed: u64,
) -> Result<AttractionMc> {
    if hit_step >= schedule.n_outer() {
        return Err(Error::precondition("hitting step must be below N"));
    }
    let wrapped = Target::Mixture(target.clone());
    let run = run_sampler(&wrapped, kind, schedule, m, seed, true)?;
    let at = |n: usize, i: usize| run.snapshots[n].state(i);
    let mut retained = 0usize;
    let mut escaped = 0usize;
    for i in 0..m {
        let s_m = spec.at_time(schedule.time(hit_step));
        let (inside, info) = good_region_membership(target, &s_m, at(hit_step, i))?;
        if !inside {
            continue;
        }
        retained += 1;
        for n in hit_step + 1..=schedule.n_outer() {
            let s_n = spec.at_time(schedule.time(n));
            let (ok, now) = good_region_membership(target, &s_n, at(n, i))?;
            if !ok || now.k_star != info.k_star {
                escaped += 1;
                break;
            }
        }
    }
    Ok(AttractionMc { retention: retained as f64 / m as f64, escapes: McFrequency::new(escaped, retained) })
}

/// Bound on `1 - w_t(x, k)` over `x` in the good region with `k_t(x) = k`:
///
/// ```text
/// (B_max / B_min)^{d/2} (1 - pi_k) / pi_k exp(-rho*^2 / (2 B_max) + r^2 / (2 B_min))
/// ```
pub fn responsibility_dominance_bound(
    target: &GaussianMixtureTarget,
    spec: &GoodRegionSpec,
    k: usize,
) -> Result<BoundValue> {
    if k >= target.len() {
        return Err(Error::domain(format!("component index {k} out of range")));
    }
    let (b_min, b_max) = b_extremes(target, spec.t);
    let pk = target.component(k).weight;
    let d = target.dim() as f64;
    let log_eps = 0.5 * d * (b_max / b_min).ln() + ((1.0 - pk) / pk).ln() - spec.rho_star.powi(2) / (2.0 * b_max)
        + spec.r * spec.r / (2.0 * b_min);
    Ok(BoundValue::new(log_eps.exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZetaReport {
    pub k: usize,
    pub bound: f64,
    /// `sum_{j != k} pi_j phi_t(j)(x) / (pi_k phi_t(k)(x))`.
    pub direct: f64,
}

/// Mixture correction factor `zeta_t(x)` at the nearest component.
pub fn direct_zeta(target: &GaussianMixtureTarget, t: f64, x: &[f64], k: usize) -> Result<f64> {
    check_dim(target.dim(), x.len())?;
    let logs: Vec<f64> = target
        .components()
        .iter()
        .map(|c| c.weight.ln() + isotropic_log_density(x, &scaled(&c.mean, t), b_of(t, c.sigma * c.sigma)))
        .collect();
    let others: Vec<f64> = logs.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| *v).collect();
    Ok((log_sum_exp(&others) - logs[k]).exp())
}

fn scaled(mu: &[f64], t: f64) -> Vec<f64> {
    mu.iter().map(|m| t * m).collect()
}

/// Bound on `zeta_t(x)` for `x` in the good region:
/// `(1 - pi_k)/pi_k max_{j != k} (B(k)/B(j))^{d/2} exp(-rho*^2/(2 B(j)) + r^2/(2 B(k)))`.
pub fn zeta_bound(target: &GaussianMixtureTarget, spec: &GoodRegionSpec, x: &[f64]) -> Result<ZetaReport> {
    let (inside, info) = good_region_membership(target, spec, x)?;
    if !inside {
        return Err(Error::precondition("x is outside the good region"));
    }
    let k = info.k_star;
    let direct = if target.len() == 1 { 0.0 } else { direct_zeta(target, spec.t, x, k)? };
    if target.len() == 1 {
        return Ok(ZetaReport { k, bound: 0.0, direct });
    }
    let b = target.path_variances(spec.t);
    let d = target.dim() as f64;
    let pk = target.component(k).weight;
    let worst = (0..target.len())
        .filter(|&j| j != k)
        .map(|j| 0.5 * d * (b[k] / b[j]).ln() - spec.rho_star.powi(2) / (2.0 * b[j]) + spec.r * spec.r / (2.0 * b[k]))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ZetaReport { k, bound: (1.0 - pk) / pk * worst.exp(), direct })
}

/// Multiple of machine epsilon allowed when cancelling the two KL estimates.
const ROUNDING_ULPS: f64 = 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KLGapReport {
    pub kl_vs_mixture: KLEstimate,
    pub kl_vs_component: KLEstimate,
    pub log_inv_pi: f64,
    /// `KL(q || p1) - KL(q || phi_k) - log(1/pi_k)` from the two estimates.
    pub delta: f64,
    /// Bootstrap standard error of `delta` (paired over samples).
    pub delta_std_error: f64,
    /// `E_q[ln w(X, k)]`, the exact value `delta` estimates.
    pub delta_direct: f64,
    pub epsilon: f64,
    /// Smallest `w(x, k)` over the samples.
    pub min_responsibility: f64,
    /// Floating-point allowance for `delta`, which cancels two `O(1)` estimates.
    pub rounding: f64,
}

impl KLGapReport {
    /// `|delta| <= -ln(1 - eps) + slack`.
    pub fn within(&self, slack: f64) -> bool {
        self.delta.abs() <= -(-self.epsilon).ln_1p() + self.rounding + slack
    }
}

/// Estimate both sides of `KL(q || p1) = KL(q || phi_k) + log(1/pi_k) + Delta`
/// from samples of `q` (row-major) against the mixture `p1`.
pub fn kl_gap_decomposition(
    q_samples: &[f64],
    target: &GaussianMixtureTarget,
    k: usize,
    epsilon: f64,
    seed: u64,
) -> Result<KLGapReport> {
    let d = target.dim();
    if k >= target.len() {
        return Err(Error::domain(format!("component index {k} out of range")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::domain("epsilon must lie in [0, 1)"));
    }
    if q_samples.len() % d != 0 {
        return Err(Error::domain("sample buffer length is not a multiple of the dimension"));
    }
    let comp = target.component(k).clone();
    let log_w: Vec<f64> = q_samples
        .par_chunks_exact(d)
        .map_init(Vec::new, |buf, x| {
            buf.resize(target.len(), 0.0);
            let lse = log_responsibilities_into(target, 1.0, x, buf);
            buf[k] - lse
        })
        .collect();
    let min_log_w = log_w.iter().copied().fold(f64::INFINITY, f64::min);
    let min_w = min_log_w.exp();
    if min_log_w < (-epsilon).ln_1p() {
        return Err(Error::precondition(format!(
            "component {k} does not dominate: min w = {min_w} < 1 - epsilon = {}",
            1.0 - epsilon
        )));
    }
    let kl_mix = knn_kl(q_samples, d, |x| target.log_density(x).unwrap_or(f64::NEG_INFINITY), seed)?;
    let kl_comp = knn_kl(q_samples, d, |x| isotropic_log_density(x, &comp.mean, comp.sigma * comp.sigma), seed)?;
    let log_inv_pi = -comp.weight.ln();
    let m = log_w.len();
    let delta_direct = log_w.iter().sum::<f64>() / m as f64;
    // per-sample difference of the two estimators is ln phi_k - ln p1 = ln w - ln pi_k
    let boots: Vec<f64> = (0..crate::divergence::BOOTSTRAP_RESAMPLES as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = aux_rng(seed, 0x6761_7000 + b);
            (0..m).map(|_| log_w[rng.random_range(0..m)]).sum::<f64>() / m as f64
        })
        .collect();
    let bm = boots.iter().sum::<f64>() / boots.len() as f64;
    let se = (boots.iter().map(|v| (v - bm) * (v - bm)).sum::<f64>() / (boots.len() - 1) as f64).sqrt();
    Ok(KLGapReport {
        kl_vs_mixture: kl_mix,
        kl_vs_component: kl_comp,
        log_inv_pi,
        delta: kl_mix.value - kl_comp.value - log_inv_pi,
        delta_std_error: se,
        delta_direct,
        epsilon,
        min_responsibility: min_w,
        rounding: ROUNDING_ULPS * f64::EPSILON * (kl_mix.value.abs() + kl_comp.value.abs() + log_inv_pi + 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureKLRow {
    pub kind: SamplerKind,
    pub n_outer: usize,
    pub n_inner: usize,
    pub kl: KLEstimate,
}

/// Nearest-neighbour `KL(p_1^A || p1)` for each sampler configuration.
pub fn mixture_kl_comparison(
    target: &GaussianMixtureTarget,
    runs: &[(SamplerKind, Schedule)],
    m: usize,
    seed: u64,
) -> Result<Vec<MixtureKLRow>> {
    let wrapped = Target::Mixture(target.clone());
    runs.iter()
        .map(|(kind, sched)| {
            let run = run_sampler(&wrapped, *kind, sched, m, seed, false)?;
            let kl = crate::divergence::knn_kl_to_target(&run.final_batch, &wrapped, seed)?;
            Ok(MixtureKLRow { kind: *kind, n_outer: sched.n_outer(), n_inner: sched.n_inner(), kl })
        })
        .collect()
}

/// A random low-dimensional bound-check configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TvConfig {
    pub target: GaussianMixtureTarget,
    pub t: f64,
    pub x: Vec<f64>,
}

fn random_mixture<R: Rng + ?Sized>(rng: &mut R, equal_sigma: bool) -> GaussianMixtureTarget {
    loop {
        let d = rng.random_range(1..=2);
        let k = rng.random_range(2..=3);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let shared = rng.random_range(0.2..1.5);
        let comps = raw
            .iter()
            .map(|w| MixtureComponent {
                weight: w / total,
                mean: (0..d).map(|_| rng.random_range(-4.0..4.0)).collect(),
                sigma: if equal_sigma { shared } else { rng.random_range(0.2..1.5) },
            })
            .collect();
        if let Ok(m) = GaussianMixtureTarget::new(comps) {
            if m.min_separation().is_some_and(|s| s > 0.1) {
                return m;
            }
        }
    }
}

/// Random `(target, t, x)` with `d in {1, 2}`, `K in {2, 3}`, `x` anywhere near
/// the scaled means.
pub fn random_tv_config<R: Rng + ?Sized>(rng: &mut R) -> TvConfig {
    let target = random_mixture(rng, false);
    let t = rng.random_range(0.05..=1.0);
    let d = target.dim();
    let x = (0..d).map(|_| t * rng.random_range(-5.0..5.0) + rng.random_range(-1.0..1.0)).collect();
    TvConfig { target, t, x }
}

/// Random equal-variance configuration with `x` inside `D_t(x) <= sqrt(B)`.
pub fn random_equal_variance_config<R: Rng + ?Sized>(rng: &mut R) -> TvConfig {
    let target = random_mixture(rng, true);
    let t = rng.random_range(0.05..=1.0);
    let d = target.dim();
    let k = rng.random_range(0..target.len());
    let b = b_of(t, target.component(k).sigma.powi(2));
    let dir = random_unit_ball(rng, d);
    let x = target.component(k).mean.iter().zip(&dir).map(|(m, u)| t * m + b.sqrt() * u).collect();
    TvConfig { target, t, x }
}

fn random_unit_ball<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|a| a * a).sum::<f64>() <= 1.0 {
            return v;
        }
    }
}

/// Random target and good region from the `beta` parameterization.
pub fn random_region_config<R: Rng + ?Sized>(rng: &mut R) -> (GaussianMixtureTarget, GoodRegionSpec) {
    let target = random_mixture(rng, false);
    let t = rng.random_range(0.3..=1.0);
    let beta = rng.random_range(0.05..0.45);
    let spec = GoodRegionSpec::from_beta(t, target.min_separation().expect("K >= 2"), beta).expect("valid beta");
    (target, spec)
}

/// Uniform draws from the good region of component `k` (rejection from the
/// radius-`r` ball around `t mu_k`).
pub fn sample_good_region<R: Rng + ?Sized>(
    rng: &mut R,
    target: &GaussianMixtureTarget,
    spec: &GoodRegionSpec,
    k: usize,
    count: usize,
    max_tries: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = target.dim();
    let centre = scaled(&target.component(k).mean, spec.t);
    let mut out = Vec::with_capacity(count);
    for _ in 0..max_tries {
        if out.len() == count {
            break;
        }
        let u = random_unit_ball(rng, d);
        let x: Vec<f64> = centre.iter().zip(&u).map(|(c, v)| c + spec.r * v).collect();
        let (inside, info) = good_region_membership(target, spec, &x)?;
        if inside && info.k_star == k {
            out.push(x);
        }
    }
    if out.len() < count {
        return Err(Error::Estimator(format!("good region sampling kept {} of {count} points", out.len())));
    }
    Ok(out)
}

/// One line of a bound-check report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheckRow {
    pub config_id: String,
    pub bound_name: String,
    pub bound_value: f64,
    pub oracle_value: f64,
    pub vacuous: bool,
    pub pass: bool,
}

/// Write rows as CSV `config_id,bound_name,bound_value,oracle_value,vacuous_flag,pass`.
pub fn write_bound_csv<W: Write>(rows: &[BoundCheckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_id", "bound_name", "bound_value", "oracle_value", "vacuous_flag", "pass"])?;
    for r in rows {
        w.write_record([
            r.config_id.clone(),
            r.bound_name.clone(),
            fmt_f64(r.bound_value),
            fmt_f64(r.oracle_value),
            r.vacuous.to_string(),
            r.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
