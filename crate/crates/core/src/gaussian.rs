//! Targets, discretization schedules and the scalar functions of the CondOT
//! path `X_t = (1 - t) X0 + t X1` with `X0 ~ N(0, I_d)`.
//!
//! For a component `N(mu, sigma^2 I_d)` the path has
//!
//! ```text
//! B(t) = (1 - t)^2 + sigma^2 t^2      Cov(X_t)    = B(t) I
//! A(t) = t (1 + sigma^2) - 1          Cov(X_t, V) = A(t) I
//! k(t) = A(t) / B(t)                  tau^2(t)    = sigma^2 / B(t)
//! ```
//!
//! and the identity `A^2 + sigma^2 = (1 + sigma^2) B` holds for every `t`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative tolerance of the `A^2 + sigma^2 = (1 + sigma^2) B` self-check.
pub const PATH_IDENTITY_RTOL: f64 = 1e-10;

/// Weight-normalization tolerance for mixtures.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::domain(format!("time {t} outside [0, 1]")))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("sigma must be positive and finite, got {sigma}")))
    }
}

// Unchecked kernels. `var` is sigma^2 and may be zero for degenerate
// (point-mass) targets, in which case B(t) > 0 still holds for t < 1.

#[inline]
pub(crate) fn b_of(t: f64, var: f64) -> f64 {
    let u = 1.0 - t;
    u * u + var * t * t
}

#[inline]
pub(crate) fn a_of(t: f64, var: f64) -> f64 {
    // t (1 + var) - 1 written to avoid cancellation near t = 1
    (t - 1.0) + t * var
}

#[inline]
pub(crate) fn k_of(t: f64, var: f64) -> f64 {
    a_of(t, var) / b_of(t, var)
}

/// `B(t) = (1 - t)^2 + sigma^2 t^2`, the variance of `X_t`.
pub fn path_variance(t: f64, sigma: f64) -> Result<f64> {
    check_time(t)?;
    check_sigma(sigma)?;
    Ok(b_of(t, sigma * sigma))
}

/// `A(t) = t (1 + sigma^2) - 1`, the cross-covariance of `X_t` and `V`.
pub fn path_cross_covariance(t: f64, sigma: f64) -> Result<f64> {
    check_time(t)?;
    check_sigma(sigma)?;
    Ok(a_of(t, sigma * sigma))
}

/// Scalar path quantities at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathCoefficients {
    pub t: f64,
    pub b: f64,
    pub a: f64,
    pub k: f64,
    pub tau2: f64,
}

/// All four path scalars at `t`, with the covariance identity verified.
pub fn path_coefficients(t: f64, sigma: f64) -> Result<PathCoefficients> {
    check_time(t)?;
    check_sigma(sigma)?;
    let var = sigma * sigma;
    let b = b_of(t, var);
    let a = a_of(t, var);
    let lhs = a * a + var;
    let rhs = (1.0 + var) * b;
    if (lhs - rhs).abs() > PATH_IDENTITY_RTOL * rhs.abs() {
        return Err(Error::Consistency(format!(
            "A^2 + sigma^2 = {lhs} but (1 + sigma^2) B = {rhs} at t = {t}, sigma = {sigma}"
        )));
    }
    Ok(PathCoefficients { t, b, a, k: a / b, tau2: var / b })
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Squared distance from `x` to the scaled point `t * mu`.
#[inline]
pub(crate) fn sq_dist_scaled(x: &[f64], t: f64, mu: &[f64]) -> f64 {
    x.iter().zip(mu).map(|(a, m)| (a - t * m) * (a - t * m)).sum()
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-density of `N(mean, var I_d)` at `x`.
#[inline]
pub(crate) fn isotropic_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * d * (LN_2PI + var.ln()) - sq_dist(x, mean) / (2.0 * var)
}

/// Target `N(mu, sigma^2 I_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UnimodalSpec", into = "UnimodalSpec")]
pub struct UnimodalGaussianTarget {
    mu: Vec<f64>,
    sigma: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnimodalSpec {
    mu: Vec<f64>,
    sigma: f64,
}

impl TryFrom<UnimodalSpec> for UnimodalGaussianTarget {
    type Error = Error;
    fn try_from(s: UnimodalSpec) -> Result<Self> {
        Self::new(s.mu, s.sigma)
    }
}

impl From<UnimodalGaussianTarget> for UnimodalSpec {
    fn from(t: UnimodalGaussianTarget) -> Self {
        UnimodalSpec { mu: t.mu, sigma: t.sigma }
    }
}

impl UnimodalGaussianTarget {
    pub fn new(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::InvalidTarget("dimension must be at least 1".into()));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidTarget("mean has non-finite entries".into()));
        }
        check_sigma(sigma).map_err(|e| Error::InvalidTarget(e.to_string()))?;
        Ok(Self { mu, sigma })
    }

    /// Zero-mean target in `d` dimensions.
    pub fn centered(d: usize, sigma: f64) -> Result<Self> {
        Self::new(vec![0.0; d], sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(isotropic_log_density(x, &self.mu, self.variance()))
    }
}

/// One weighted isotropic component of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sigma: f64,
}

/// Target `sum_k pi_k N(mu_k, sigma_k^2 I_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixtureTarget {
    components: Vec<MixtureComponent>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureSpec {
    components: Vec<MixtureComponent>,
}

impl TryFrom<MixtureSpec> for GaussianMixtureTarget {
    type Error = Error;
    fn try_from(s: MixtureSpec) -> Result<Self> {
        Self::new(s.components)
    }
}

impl From<GaussianMixtureTarget> for MixtureSpec {
    fn from(t: GaussianMixtureTarget) -> Self {
        MixtureSpec { components: t.components }
    }
}

impl GaussianMixtureTarget {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let invalid = |msg: String| Err(Error::InvalidTarget(msg));
        let Some(first) = components.first() else {
            return invalid("mixture needs at least one component".into());
        };
        let dim = first.mean.len();
        if dim == 0 {
            return invalid("dimension must be at least 1".into());
        }
        let mut total = 0.0;
        for (j, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return invalid(format!("component {j} has dimension {}, expected {dim}", c.mean.len()));
            }
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return invalid(format!("component {j} weight {} not in (0, 1]", c.weight));
            }
            if !(c.sigma.is_finite() && c.sigma > 0.0) {
                return invalid(format!("component {j} sigma {} not positive", c.sigma));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return invalid(format!("component {j} mean has non-finite entries"));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return invalid(format!("weights sum to {total}, expected 1"));
        }
        for i in 0..components.len() {
            for j in (i + 1)..components.len() {
                let (a, b) = (&components[i], &components[j]);
                if a.mean == b.mean && a.sigma == b.sigma {
                    return invalid(format!("components {i} and {j} are exact duplicates"));
                }
            }
        }
        Ok(Self { components, dim })
    }

    /// Equal-weight components with a shared standard deviation.
    pub fn equal_weights(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let k = means.len().max(1) as f64;
        Self::new(means.into_iter().map(|mean| MixtureComponent { weight: 1.0 / k, mean, sigma }).collect())
    }

    /// Two equal-weight modes on a circle of `radius` at polar angles
    /// `+angle` and `-angle`, in two dimensions.
    pub fn symmetric_pair_on_circle(radius: f64, angle: f64, sigma: f64) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        Self::equal_weights(vec![vec![radius * c, radius * s], vec![radius * c, -radius * s]], sigma)
    }

    pub fn from_unimodal(target: &UnimodalGaussianTarget) -> Self {
        Self {
            components: vec![MixtureComponent { weight: 1.0, mean: target.mean().to_vec(), sigma: target.sigma() }],
            dim: target.dim(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn component(&self, j: usize) -> &MixtureComponent {
        &self.components[j]
    }

    /// `D_min = min_{j != k} ||mu_j - mu_k||`; `None` for a single component.
    pub fn min_separation(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                let d = sq_dist(&self.components[i].mean, &self.components[j].mean).sqrt();
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }

    pub fn sigma_max(&self) -> f64 {
        self.components.iter().map(|c| c.sigma).fold(0.0, f64::max)
    }

    /// `B_t(j)` for every component.
    pub fn path_variances(&self, t: f64) -> Vec<f64> {
        self.components.iter().map(|c| b_of(t, c.sigma * c.sigma)).collect()
    }

    /// Per-component `log pi_j + log N(x; mu_j, sigma_j^2 I)`.
    pub fn component_log_densities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(self
            .components
            .iter()
            .map(|c| c.weight.ln() + isotropic_log_density(x, &c.mean, c.sigma * c.sigma))
            .collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.component_log_densities(x)?))
    }
}

/// Either kind of target; samplers and the harness operate on this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Unimodal(UnimodalGaussianTarget),
    Mixture(GaussianMixtureTarget),
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Unimodal(t) => t.dim(),
            Target::Mixture(m) => m.dim(),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            Target::Unimodal(t) => t.log_density(x),
            Target::Mixture(m) => m.log_density(x),
        }
    }

    /// View as a mixture (a unimodal target becomes one component).
    pub fn to_mixture(&self) -> GaussianMixtureTarget {
        match self {
            Target::Unimodal(t) => GaussianMixtureTarget::from_unimodal(t),
            Target::Mixture(m) => m.clone(),
        }
    }
}

impl From<UnimodalGaussianTarget> for Target {
    fn from(t: UnimodalGaussianTarget) -> Self {
        Target::Unimodal(t)
    }
}

impl From<GaussianMixtureTarget> for Target {
    fn from(m: GaussianMixtureTarget) -> Self {
        Target::Mixture(m)
    }
}

/// Outer (`N`) and inner (`S`) uniform discretizations of `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    n_outer: usize,
    n_inner: usize,
}

impl Schedule {
    pub fn new(n_outer: usize, n_inner: usize) -> Result<Self> {
        if n_outer == 0 {
            return Err(Error::InvalidSchedule("outer step count N must be >= 1".into()));
        }
        if n_inner == 0 {
            return Err(Error::InvalidSchedule("inner step count S must be >= 1".into()));
        }
        Ok(Self { n_outer, n_inner })
    }

    /// Outer-only schedule (`S = 1`), as used by FM.
    pub fn outer(n_outer: usize) -> Result<Self> {
        Self::new(n_outer, 1)
    }

    pub fn n_outer(&self) -> usize {
        self.n_outer
    }

    pub fn n_inner(&self) -> usize {
        self.n_inner
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_outer as f64
    }

    pub fn ds(&self) -> f64 {
        1.0 / self.n_inner as f64
    }

    /// `t_n = n / N`; exact at both endpoints.
    pub fn time(&self, n: usize) -> f64 {
        n as f64 / self.n_outer as f64
    }

    /// `t_{n,s} = s / S`.
    pub fn inner_time(&self, s: usize) -> f64 {
        s as f64 / self.n_inner as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n_outer).map(|n| self.time(n)).collect()
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn covariance_identity_holds(t in 0.0f64..=1.0, sigma in 1e-3f64..10.0) {
            let c = path_coefficients(t, sigma).unwrap();
            let lhs = c.a * c.a + sigma * sigma;
            let rhs = (1.0 + sigma * sigma) * c.b;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs);
            prop_assert!(c.b > 0.0);
            prop_assert!((c.tau2 - sigma * sigma / c.b).abs() <= 1e-15 * c.tau2.max(1.0));
        }
    }
}
