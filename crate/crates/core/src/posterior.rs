//! Exact conditional law of the difference latent `V = X1 - X0` given
//! `X_t = x`.
//!
//! For a single component `N(mu, sigma^2 I)`, `(X_t, V)` is jointly Gaussian
//! and `V | X_t = x ~ N(mu + k(t) (x - t mu), tau^2(t) I)`. For a mixture the
//! law is the responsibility-weighted mixture of the per-component laws, with
//! responsibilities
//!
//! ```text
//! w_t(x, j)  ∝  pi_j B_t(j)^{-d/2} exp(-||x - t mu_j||^2 / (2 B_t(j)))
//! ```
//!
//! evaluated in log space.

use rand::Rng;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{
    b_of, k_of, log_sum_exp, path_coefficients, sq_dist_scaled, GaussianMixtureTarget, Target, UnimodalGaussianTarget,
};
use crate::rng::fill_standard_normal;

/// Tolerance on `sum_j w_j = 1`.
pub const RESPONSIBILITY_SUM_TOL: f64 = 1e-10;

/// Gaussian law `N(mean, tau2 I)` of `V` given `X_t = x` for one component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnimodalPosterior {
    pub mean: Vec<f64>,
    pub tau2: f64,
}

/// Mixture law of `V` given `X_t = x`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MixturePosterior {
    responsibilities: Vec<f64>,
    #[serde(skip)]
    log_responsibilities: Vec<f64>,
    components: Vec<UnimodalPosterior>,
}

impl MixturePosterior {
    pub fn responsibilities(&self) -> &[f64] {
        &self.responsibilities
    }

    pub fn components(&self) -> &[UnimodalPosterior] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Nearest scaled mode `k_t(x)`, its distance `D_t(x)` and margin `rho_t(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NearestModeInfo {
    pub k_star: usize,
    pub distance: f64,
    /// `+inf` when the target has a single component.
    pub margin: f64,
}

/// A distribution over difference latents that can be sampled.
pub trait DifferenceLaw {
    fn dim(&self) -> usize;

    fn mean(&self) -> Vec<f64>;

    /// Write one draw into `out` (length `dim`).
    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]);
}

impl DifferenceLaw for UnimodalPosterior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn mean(&self) -> Vec<f64> {
        self.mean.clone()
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        fill_standard_normal(rng, out);
        let tau = self.tau2.sqrt();
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o = m + tau * *o;
        }
    }
}

impl DifferenceLaw for MixturePosterior {
    fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, c) in self.responsibilities.iter().zip(&self.components) {
            for (o, m) in out.iter_mut().zip(&c.mean) {
                *o += w * m;
            }
        }
        out
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        // no selection draw for one component, so K = 1 matches the unimodal stream
        if self.components.len() == 1 {
            return self.components[0].sample_into(rng, out);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (j, w) in self.responsibilities.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        // rounding can leave u >= acc; fall back to the last component with mass
        if u >= acc {
            pick = self.responsibilities.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
        }
        self.components[pick].sample_into(rng, out);
    }
}

/// Isotropic weighted components, viewed as the target of a CondOT problem.
///
/// Implemented both by targets (outer problem) and by posteriors (the inner
/// problem TM solves per outer step).
pub(crate) trait IsoComponents {
    fn count(&self) -> usize;
    fn log_weight(&self, j: usize) -> f64;
    fn mean_of(&self, j: usize) -> &[f64];
    fn var_of(&self, j: usize) -> f64;
}

impl IsoComponents for UnimodalGaussianTarget {
    fn count(&self) -> usize {
        1
    }
    fn log_weight(&self, _: usize) -> f64 {
        0.0
    }
    fn mean_of(&self, _: usize) -> &[f64] {
        self.mean()
    }
    fn var_of(&self, _: usize) -> f64 {
        self.variance()
    }
}

impl IsoComponents for GaussianMixtureTarget {
    fn count(&self) -> usize {
        self.len()
    }
    fn log_weight(&self, j: usize) -> f64 {
        self.component(j).weight.ln()
    }
    fn mean_of(&self, j: usize) -> &[f64] {
        &self.component(j).mean
    }
    fn var_of(&self, j: usize) -> f64 {
        let s = self.component(j).sigma;
        s * s
    }
}

impl IsoComponents for UnimodalPosterior {
    fn count(&self) -> usize {
        1
    }
    fn log_weight(&self, _: usize) -> f64 {
        0.0
    }
    fn mean_of(&self, _: usize) -> &[f64] {
        &self.mean
    }
    fn var_of(&self, _: usize) -> f64 {
        self.tau2
    }
}

impl IsoComponents for MixturePosterior {
    fn count(&self) -> usize {
        self.components.len()
    }
    fn log_weight(&self, j: usize) -> f64 {
        self.log_responsibilities[j]
    }
    fn mean_of(&self, j: usize) -> &[f64] {
        &self.components[j].mean
    }
    fn var_of(&self, j: usize) -> f64 {
        self.components[j].tau2
    }
}

/// Per-component posterior `mu + k(t) (x - t mu)` written into `out`;
/// returns `tau^2 = var / B(t)`.
#[inline]
pub(crate) fn component_posterior_into(mu: &[f64], var: f64, t: f64, x: &[f64], out: &mut [f64]) -> f64 {
    let k = k_of(t, var);
    for ((o, m), xi) in out.iter_mut().zip(mu).zip(x) {
        *o = m + k * (xi - m * t);
    }
    var / b_of(t, var)
}

/// Unnormalized log responsibilities written into `out`; returns their
/// log-sum-exp.
pub(crate) fn log_responsibilities_into<C: IsoComponents + ?Sized>(
    comps: &C,
    t: f64,
    x: &[f64],
    out: &mut [f64],
) -> f64 {
    let half_d = 0.5 * x.len() as f64;
    for (j, o) in out.iter_mut().enumerate() {
        let b = b_of(t, comps.var_of(j));
        *o = comps.log_weight(j) - half_d * b.ln() - sq_dist_scaled(x, t, comps.mean_of(j)) / (2.0 * b);
    }
    log_sum_exp(out)
}

/// `E[V | X_t = x]` for the CondOT problem targeting `comps`.
///
/// `scratch` is resized as needed and holds log responsibilities.
pub(crate) fn conditional_mean_into<C: IsoComponents + ?Sized>(
    comps: &C,
    t: f64,
    x: &[f64],
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let kcount = comps.count();
    if kcount == 1 {
        component_posterior_into(comps.mean_of(0), comps.var_of(0), t, x, out);
        return;
    }
    scratch.resize(kcount, 0.0);
    let lse = log_responsibilities_into(comps, t, x, scratch);
    out.iter_mut().for_each(|o| *o = 0.0);
    for j in 0..kcount {
        let w = (scratch[j] - lse).exp();
        if w == 0.0 {
            continue;
        }
        let mu = comps.mean_of(j);
        let k = k_of(t, comps.var_of(j));
        for ((o, m), xi) in out.iter_mut().zip(mu).zip(x) {
            *o += w * (m + k * (xi - m * t));
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::domain(format!("time {t} outside [0, 1]")))
    }
}

/// Exact Gaussian law of `V` given `X_t = x` for a unimodal target.
pub fn unimodal_posterior(target: &UnimodalGaussianTarget, t: f64, x: &[f64]) -> Result<UnimodalPosterior> {
    check_dim(target.dim(), x.len())?;
    // validates t and the covariance identity
    path_coefficients(t, target.sigma())?;
    let mut mean = vec![0.0; x.len()];
    let tau2 = component_posterior_into(target.mean(), target.variance(), t, x, &mut mean);
    Ok(UnimodalPosterior { mean, tau2 })
}

/// Normalized responsibilities `w_t(x, j)`.
pub fn responsibilities(target: &GaussianMixtureTarget, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(target.dim(), x.len())?;
    check_time(t)?;
    let mut logw = vec![0.0; target.len()];
    let lse = log_responsibilities_into(target, t, x, &mut logw);
    Ok(logw.iter().map(|l| (l - lse).exp()).collect())
}

/// Responsibility-weighted mixture of per-component posteriors.
pub fn mixture_posterior(target: &GaussianMixtureTarget, t: f64, x: &[f64]) -> Result<MixturePosterior> {
    check_dim(target.dim(), x.len())?;
    check_time(t)?;
    let mut out = MixturePosterior::default();
    mixture_posterior_into(target, t, x, &mut out);
    Ok(out)
}

/// Unchecked variant of [`mixture_posterior`] that reuses `out`'s buffers.
pub(crate) fn mixture_posterior_into(target: &GaussianMixtureTarget, t: f64, x: &[f64], out: &mut MixturePosterior) {
    let kcount = target.len();
    let d = x.len();
    out.log_responsibilities.resize(kcount, 0.0);
    out.responsibilities.resize(kcount, 0.0);
    out.components.resize_with(kcount, || UnimodalPosterior { mean: vec![0.0; d], tau2: 0.0 });
    let lse = log_responsibilities_into(target, t, x, &mut out.log_responsibilities);
    for j in 0..kcount {
        out.log_responsibilities[j] -= lse;
        out.responsibilities[j] = out.log_responsibilities[j].exp();
        let c = &mut out.components[j];
        c.mean.resize(d, 0.0);
        c.tau2 = component_posterior_into(target.mean_of(j), target.var_of(j), t, x, &mut c.mean);
    }
}

/// `count` i.i.d. draws from a posterior.
pub fn sample_posterior<P: DifferenceLaw, R: Rng + ?Sized>(post: &P, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let mut v = vec![0.0; post.dim()];
            post.sample_into(rng, &mut v);
            v
        })
        .collect()
}

/// Nearest scaled mean `t mu_j` to `x`; ties go to the lowest index.
pub fn nearest_mode(target: &GaussianMixtureTarget, t: f64, x: &[f64]) -> Result<NearestModeInfo> {
    check_dim(target.dim(), x.len())?;
    let dists: Vec<f64> = target.components().iter().map(|c| sq_dist_scaled(x, t, &c.mean).sqrt()).collect();
    let mut k_star = 0;
    for (j, &d) in dists.iter().enumerate().skip(1) {
        if d < dists[k_star] {
            k_star = j;
        }
    }
    let distance = dists[k_star];
    let margin = dists
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k_star)
        .map(|(_, &d)| d - distance)
        .fold(f64::INFINITY, f64::min);
    Ok(NearestModeInfo { k_star, distance, margin })
}

impl Target {
    /// `E[V | X_t = x]`, the exact FM velocity.
    pub fn conditional_mean(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        check_time(t)?;
        let mut out = vec![0.0; x.len()];
        let mut scratch = Vec::new();
        match self {
            Target::Unimodal(u) => conditional_mean_into(u, t, x, &mut out, &mut scratch),
            Target::Mixture(m) => conditional_mean_into(m, t, x, &mut out, &mut scratch),
        }
        Ok(out)
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::gaussian::MixtureComponent;
    use proptest::prelude::*;

    fn mixture_strategy() -> impl Strategy<Value = (GaussianMixtureTarget, f64, Vec<f64>)> {
        (1usize..4, 1usize..4).prop_flat_map(|(k, d)| {
            (
                prop::collection::vec((0.05f64..1.0, prop::collection::vec(-5.0f64..5.0, d), 0.01f64..3.0), k),
                0.0f64..=1.0,
                prop::collection::vec(-20.0f64..20.0, d),
            )
                .prop_filter_map("valid mixture", |(raw, t, x)| {
                    let total: f64 = raw.iter().map(|r| r.0).sum();
                    let comps = raw
                        .into_iter()
                        .map(|(w, mean, sigma)| MixtureComponent { weight: w / total, mean, sigma })
                        .collect();
                    GaussianMixtureTarget::new(comps).ok().map(|m| (m, t, x))
                })
        })
    }

    proptest! {
        #[test]
        fn responsibilities_normalized((m, t, x) in mixture_strategy()) {
            let w = responsibilities(&m, t, &x).unwrap();
            prop_assert_eq!(w.len(), m.len());
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= RESPONSIBILITY_SUM_TOL);
        }

        #[test]
        fn responsibilities_shift_invariant((m, t, x) in mixture_strategy(), shift in -500.0f64..500.0) {
            // adding a constant to every log-density leaves w unchanged
            let mut logw = vec![0.0; m.len()];
            let lse = log_responsibilities_into(&m, t, &x, &mut logw);
            let shifted: Vec<f64> = logw.iter().map(|l| l + shift).collect();
            let lse2 = log_sum_exp(&shifted);
            for (a, b) in logw.iter().zip(&shifted) {
                let wa = (a - lse).exp();
                let wb = (b - lse2).exp();
                prop_assert!((wa - wb).abs() <= 1e-12);
            }
        }
    }
}
