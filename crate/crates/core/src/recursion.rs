//! Closed-form variance and KL evolution of the FM and TM samplers on a
//! unimodal target `N(mu, sigma^2 I)`.
//!
//! With `a_n = 1 + dt k(t_n)` every Euler step is affine, so the per-coordinate
//! variance `s_n` of the sampler obeys
//!
//! ```text
//! s^FM_{n+1} = a_n^2 s^FM_n
//! s^TM_{n+1} = a_n^2 s^TM_n + dt^2 c_S tau^2(t_n)
//! ```
//!
//! where `c_S` is the variance contraction of an `S`-step FM solve of the
//! inner problem (source `N(0, I)`, target `N(m, tau^2 I)`). The ratios
//! `r_n = s_n / B(t_n)` satisfy `r_{n+1} = w_n r_n + (1 - w_n) c` with
//! `c = 0` for FM.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::{a_of, b_of, k_of, Schedule};
use crate::quadrature::adaptive_simpson;
use crate::samplers::InnerMode;

/// Rate fits drop points below this KL.
pub const KL_FLOOR: f64 = 1e-14;

const P_SIGMA_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub n: usize,
    pub t: f64,
    pub b: f64,
    pub a: f64,
    pub k: f64,
    pub tau2: f64,
    /// `1 + dt k(t_n)`; absent on the final row.
    pub a_n: Option<f64>,
    /// Scalar `c` with `b_n = c mu`, i.e. `dt (1 - k(t_n) t_n)`.
    pub b_coef: Option<f64>,
    pub w: Option<f64>,
    /// Inner contraction used for the step out of `t_n`.
    pub c_s: Option<f64>,
    pub s_fm: f64,
    pub r_fm: f64,
    pub s_tm: Option<f64>,
    pub r_tm: Option<f64>,
}

impl TraceRow {
    /// TM variance injected by the step out of `t_n`: `dt^2 c_S tau^2(t_n)`.
    pub fn tm_increment(&self, dt: f64) -> Option<f64> {
        self.c_s.map(|c| dt * dt * c * self.tau2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceTrace {
    pub sigma: f64,
    pub d: usize,
    pub n_outer: usize,
    /// `None` for an FM-only trace; `Some(None)` for exact inner sampling.
    pub n_inner: Option<Option<usize>>,
    pub rows: Vec<TraceRow>,
}

impl VarianceTrace {
    pub fn dt(&self) -> f64 {
        1.0 / self.n_outer as f64
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace has N + 1 rows")
    }

    pub fn has_tm(&self) -> bool {
        self.n_inner.is_some()
    }

    /// Write the trace as CSV with columns
    /// `n,t,B,A,k,tau2,a,w,s_fm,s_tm,r_fm,r_tm,c_S`; absent values are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "t", "B", "A", "k", "tau2", "a", "w", "s_fm", "s_tm", "r_fm", "r_tm", "c_S"])?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                fmt_f64(r.t),
                fmt_f64(r.b),
                fmt_f64(r.a),
                fmt_f64(r.k),
                fmt_f64(r.tau2),
                opt(r.a_n),
                opt(r.w),
                fmt_f64(r.s_fm),
                opt(r.s_tm),
                fmt_f64(r.r_fm),
                opt(r.r_tm),
                opt(r.c_s),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KLReport {
    /// `+inf` when the FM variance collapsed to zero.
    pub kl_fm: f64,
    pub kl_tm: Option<f64>,
    pub d: usize,
    pub s_fm_final: f64,
    pub s_tm_final: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Smallest and largest abscissa used.
    pub range: (f64, f64),
    /// Root-mean-square residual in log space.
    pub residual: f64,
    pub points_used: usize,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("sigma must be positive and finite, got {sigma}")))
    }
}

/// KL between `N(m, s I_d)` and `N(m, sigma^2 I_d)` as a function of
/// `x = s / sigma^2`: `d/2 (x - 1 - ln x)`. Returns `+inf` at `x = 0`.
pub fn variance_ratio_kl(x: f64, d: usize) -> f64 {
    if x <= 0.0 {
        return f64::INFINITY;
    }
    let u = x - 1.0;
    0.5 * d as f64 * (u - u.ln_1p())
}

/// Variance contraction of an `S`-step FM Euler solve towards `N(m, tau^2 I)`
/// from `N(0, I)`: `prod_s (1 + ds k_tau(s ds))^2`, divided by `tau^2`.
pub fn inner_contraction(tau: f64, steps: usize) -> Result<f64> {
    check_sigma(tau)?;
    if steps == 0 {
        return Err(Error::domain("inner step count must be at least 1"));
    }
    let var = tau * tau;
    let ds = 1.0 / steps as f64;
    let mut s = 1.0;
    for i in 0..steps {
        let a = 1.0 + ds * k_of(i as f64 / steps as f64, var);
        s *= a * a;
    }
    Ok(s / var)
}

fn row(n: usize, t: f64, var: f64) -> TraceRow {
    let b = b_of(t, var);
    TraceRow {
        n,
        t,
        b,
        a: a_of(t, var),
        k: k_of(t, var),
        tau2: var / b,
        a_n: None,
        b_coef: None,
        w: None,
        c_s: None,
        s_fm: 0.0,
        r_fm: 0.0,
        s_tm: None,
        r_tm: None,
    }
}

fn build_trace(
    sigma: f64,
    n_outer: usize,
    d: usize,
    inner: Option<InnerMode>,
    n_inner: usize,
) -> Result<VarianceTrace> {
    check_sigma(sigma)?;
    if n_outer == 0 {
        return Err(Error::domain("outer step count must be at least 1"));
    }
    if d == 0 {
        return Err(Error::domain("dimension must be at least 1"));
    }
    let var = sigma * sigma;
    let dt = 1.0 / n_outer as f64;
    let mut rows = Vec::with_capacity(n_outer + 1);
    let mut s_fm = 1.0;
    let mut s_tm = 1.0;
    for n in 0..=n_outer {
        let t = n as f64 / n_outer as f64;
        let mut r = row(n, t, var);
        r.s_fm = s_fm;
        r.r_fm = s_fm / r.b;
        if inner.is_some() {
            r.s_tm = Some(s_tm);
            r.r_tm = Some(s_tm / r.b);
        }
        if n < n_outer {
            let a_n = 1.0 + dt * r.k;
            let eta = dt * dt * var / r.b;
            r.a_n = Some(a_n);
            r.b_coef = Some(dt * (1.0 - r.k * t));
            r.w = Some(a_n * a_n / (a_n * a_n + eta / r.b));
            s_fm *= a_n * a_n;
            if let Some(mode) = inner {
                let c = match mode {
                    InnerMode::Exact => 1.0,
                    InnerMode::Euler => inner_contraction(r.tau2.sqrt(), n_inner)?,
                };
                r.c_s = Some(c);
                s_tm = a_n * a_n * s_tm + c * eta;
            }
        }
        rows.push(r);
    }
    Ok(VarianceTrace {
        sigma,
        d,
        n_outer,
        n_inner: inner.map(|m| match m {
            InnerMode::Exact => None,
            InnerMode::Euler => Some(n_inner),
        }),
        rows,
    })
}

/// Closed-form FM trace on `N(mu, sigma^2 I_d)` with `N` outer steps.
pub fn fm_variance_trace(sigma: f64, n_outer: usize, d: usize) -> Result<VarianceTrace> {
    build_trace(sigma, n_outer, d, None, 1)
}

/// Closed-form FM and TM trace; `schedule.n_inner()` is `S` for Euler inner
/// mode and ignored for exact inner sampling.
pub fn tm_variance_trace(sigma: f64, schedule: &Schedule, mode: InnerMode, d: usize) -> Result<VarianceTrace> {
    build_trace(sigma, schedule.n_outer(), d, Some(mode), schedule.n_inner())
}

/// KL of the final sampler marginals against the target.
pub fn gaussian_kl_from_trace(trace: &VarianceTrace) -> KLReport {
    let last = trace.last();
    let var = trace.sigma * trace.sigma;
    KLReport {
        kl_fm: variance_ratio_kl(last.s_fm / var, trace.d),
        kl_tm: last.s_tm.map(|s| variance_ratio_kl(s / var, trace.d)),
        d: trace.d,
        s_fm_final: last.s_fm,
        s_tm_final: last.s_tm,
    }
}

/// Least-squares slope of `ln kl` against `ln x`.
///
/// Points with `kl < KL_FLOOR` are dropped; at least four must remain.
pub fn fit_rate(xs: &[f64], kls: &[f64]) -> Result<RateFit> {
    if xs.len() != kls.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), got: kls.len() });
    }
    if let Some(bad) = kls.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!("rate fit needs positive finite KL values, got {bad}")));
    }
    if let Some(bad) = xs.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!("rate fit needs positive abscissae, got {bad}")));
    }
    let pts: Vec<(f64, f64)> =
        xs.iter().zip(kls).filter(|(_, &k)| k >= KL_FLOOR).map(|(&x, &k)| (x.ln(), k.ln())).collect();
    if pts.len() < 4 {
        return Err(Error::precondition(format!(
            "rate fit needs at least 4 points above the KL floor, got {}",
            pts.len()
        )));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::precondition("rate fit needs distinct abscissae"));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / m).sqrt();
    let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).exp();
    let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).exp();
    Ok(RateFit { slope, intercept, range: (lo, hi), residual, points_used: pts.len() })
}

/// `P(sigma) = sigma^2 int_0^1 B(t)^{-2} dt`, the first-order coefficient in
/// `1 - r_N^FM ~ P(sigma) / N`.
pub fn p_sigma(sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let var = sigma * sigma;
    let integral = adaptive_simpson(|t| b_of(t, var).powi(-2), 0.0, 1.0, P_SIGMA_TOL / var)?;
    Ok(var * integral)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fm_examples() {
        let tr = fm_variance_trace(1.0, 1, 1).unwrap();
        assert_eq!(tr.last().s_fm, 0.0);
        let tr = fm_variance_trace(1.0, 2, 1).unwrap();
        assert_eq!(tr.rows[0].a_n, Some(0.5));
        assert_eq!(tr.rows[1].a_n, Some(1.0));
        assert_eq!(tr.last().s_fm, 0.25);
        let tr = fm_variance_trace(1.0, 1024, 1).unwrap();
        assert!((tr.last().s_fm - 1.0).abs() < 0.01);
    }

    #[test]
    fn trace_initial_and_final_rows() {
        let tr = tm_variance_trace(0.7, &Schedule::new(5, 3).unwrap(), InnerMode::Euler, 2).unwrap();
        assert_eq!(tr.rows.len(), 6);
        let r0 = &tr.rows[0];
        assert_eq!((r0.s_fm, r0.s_tm, r0.r_fm, r0.r_tm), (1.0, Some(1.0), 1.0, Some(1.0)));
        let last = tr.last();
        assert_eq!(last.t, 1.0);
        assert!(last.a_n.is_none() && last.w.is_none() && last.c_s.is_none());
    }

    #[test]
    fn contraction_examples() {
        assert_eq!(inner_contraction(1.0, 1).unwrap(), 0.0);
        assert_eq!(inner_contraction(0.3, 1).unwrap(), 0.0);
        // S = 2, tau = 1: a_0 = 1 + 0.5 * (-1), a_1 = 1 + 0.5 * k(0.5) = 1
        assert!((inner_contraction(1.0, 2).unwrap() - 0.25).abs() < 1e-15);
        let c64 = inner_contraction(1.0, 64).unwrap();
        let c128 = inner_contraction(1.0, 128).unwrap();
        let ratio = (1.0 - c64) / (1.0 - c128);
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
        assert!(inner_contraction(0.0, 4).is_err());
        assert!(inner_contraction(1.0, 0).is_err());
    }

    #[test]
    fn contraction_increases_to_one() {
        for &tau in &[0.05, 0.5, 1.0, 4.0] {
            let mut prev = -1.0;
            for s in [1usize, 2, 3, 4, 8, 16, 64, 256, 4096] {
                let c = inner_contraction(tau, s).unwrap();
                assert!((0.0..=1.0).contains(&c));
                assert!(c > prev, "tau {tau} S {s}");
                prev = c;
            }
            assert!(prev > 0.99);
        }
    }

    #[test]
    fn contraction_first_order_term() {
        for &tau in &[0.3, 1.0, 2.0] {
            let s = 4096;
            let c = inner_contraction(tau, s).unwrap();
            let p = p_sigma(tau).unwrap();
            assert!(((1.0 - c) * s as f64 / p - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn tm_examples() {
        let tr = tm_variance_trace(1.0, &Schedule::outer(2).unwrap(), InnerMode::Exact, 1).unwrap();
        assert!((tr.last().s_tm.unwrap() - 1.0).abs() < 1e-15);
        assert!(gaussian_kl_from_trace(&tr).kl_tm.unwrap() < 1e-15);

        let tr = tm_variance_trace(1.0, &Schedule::new(2, 2).unwrap(), InnerMode::Euler, 1).unwrap();
        let s = tr.last().s_tm.unwrap();
        assert!(s > 0.25 && s < 1.0);

        let sigma = 1e-8;
        let tr = tm_variance_trace(sigma, &Schedule::new(6, 3).unwrap(), InnerMode::Euler, 1).unwrap();
        let l = tr.last();
        assert!((l.s_tm.unwrap() - l.s_fm).abs() <= 1e-6 * l.s_fm.max(sigma * sigma));
    }

    #[test]
    fn single_inner_step_equals_fm() {
        let tr = tm_variance_trace(0.8, &Schedule::new(7, 1).unwrap(), InnerMode::Euler, 3).unwrap();
        for r in &tr.rows {
            assert_eq!(r.s_tm, Some(r.s_fm));
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(variance_ratio_kl(1.0, 3), 0.0);
        let v = variance_ratio_kl(0.25, 1);
        assert!((v - 0.5 * (0.25 - 1.0 - 0.25f64.ln())).abs() < 1e-15);
        assert!((v - 0.31815).abs() < 1e-5);
        let rep = gaussian_kl_from_trace(&fm_variance_trace(1.0, 1, 2).unwrap());
        assert_eq!(rep.kl_fm, f64::INFINITY);
        assert!(rep.kl_tm.is_none());
    }

    #[test]
    fn b_update_identity() {
        for &sigma in &[0.01, 0.3, 1.0, 3.0] {
            let tr = fm_variance_trace(sigma, 37, 1).unwrap();
            let dt = tr.dt();
            for w in tr.rows.windows(2) {
                let (r, nx) = (&w[0], &w[1]);
                let a = r.a_n.unwrap();
                let pred = a * a * r.b + dt * dt * sigma * sigma / r.b;
                assert!((pred - nx.b).abs() <= 1e-10 * nx.b);
            }
        }
    }

    #[test]
    fn ratio_recursion_matches_variances() {
        let sched = Schedule::new(9, 3).unwrap();
        let tr = tm_variance_trace(0.6, &sched, InnerMode::Euler, 1).unwrap();
        for w in tr.rows.windows(2) {
            let (r, nx) = (&w[0], &w[1]);
            let wn = r.w.unwrap();
            assert!((wn * r.r_fm - nx.r_fm).abs() < 1e-12);
            let pred = wn * r.r_tm.unwrap() + (1.0 - wn) * r.c_s.unwrap();
            assert!((pred - nx.r_tm.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_rate_examples() {
        let ns = [4.0, 8.0, 16.0, 32.0, 64.0];
        let kl: Vec<f64> = ns.iter().map(|n| 3.0 / (n * n)).collect();
        let fit = fit_rate(&ns, &kl).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert_eq!(fit.points_used, 5);
        assert!(fit.residual < 1e-12);

        assert!(fit_rate(&ns, &[1.0, 0.5, 0.0, 0.1, 0.2]).is_err());
        assert!(fit_rate(&ns[..3], &kl[..3]).is_err());
        // a floor-contaminated point is dropped
        let mut kl2 = kl.clone();
        kl2.push(1e-16);
        let mut ns2 = ns.to_vec();
        ns2.push(128.0);
        assert_eq!(fit_rate(&ns2, &kl2).unwrap().points_used, 5);
    }

    #[test]
    fn p_sigma_unit_closed_form() {
        // sigma = 1: B = 2t^2 - 2t + 1 = 2((t - 1/2)^2 + 1/4)
        // int_0^1 B^-2 = 1 + pi/2 (substitute u = 2t - 1)
        let p = p_sigma(1.0).unwrap();
        assert!((p - (1.0 + std::f64::consts::FRAC_PI_2)).abs() < 1e-9);
    }

    #[test]
    fn csv_columns() {
        let tr = tm_variance_trace(1.0, &Schedule::new(2, 2).unwrap(), InnerMode::Euler, 1).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "n,t,B,A,k,tau2,a,w,s_fm,s_tm,r_fm,r_tm,c_S");
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().ends_with(','));
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tm_beats_fm(sigma in 0.05f64..5.0, n in 2usize..40, s in 2usize..16, d in 1usize..10) {
            let tr = tm_variance_trace(sigma, &Schedule::new(n, s).unwrap(), InnerMode::Euler, d).unwrap();
            for r in tr.rows.iter().skip(1) {
                let rt = r.r_tm.unwrap();
                prop_assert!(r.r_fm < rt && rt <= 1.0 + 1e-12);
            }
            for r in tr.rows.iter().take(n) {
                let w = r.w.unwrap();
                prop_assert!(w > 0.0 && w < 1.0);
            }
            let rep = gaussian_kl_from_trace(&tr);
            prop_assert!(rep.kl_fm >= 0.0);
            prop_assert!(rep.kl_tm.unwrap() < rep.kl_fm);
        }

        #[test]
        fn r_fm_strictly_decreasing(sigma in 0.05f64..5.0, n in 2usize..60) {
            let tr = fm_variance_trace(sigma, n, 1).unwrap();
            for w in tr.rows.windows(2) {
                prop_assert!(w[1].r_fm < w[0].r_fm);
            }
        }

        #[test]
        fn contraction_in_unit_interval(tau in 1e-3f64..10.0, s in 1usize..200) {
            let c = inner_contraction(tau, s).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
