//! KL divergences and the cosine-similarity diagnostic.
//!
//! [`knn_kl`] estimates `KL(p || q)` from samples of `p` and the exact
//! log-density of `q`:
//!
//! ```text
//! KL ~= -H_KL(p) - (1/M) sum_i ln q(x_i)
//! H_KL = (d/M) sum_i ln rho_i + ln V_d + psi(M) - psi(1)
//! ```
//!
//! where `rho_i` is the distance from `x_i` to its nearest other sample and
//! `V_d` the volume of the unit `d`-ball (Kozachenko-Leonenko, `k = 1`).

use std::io::Write;
use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{sq_dist, Target};
use crate::recursion::fmt_f64;
use crate::rng::aux_rng;
use crate::samplers::SampleBatch;

pub const MIN_KNN_SAMPLES: usize = 1000;
pub const MAX_KNN_DIM: usize = 16;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
pub const JITTER_SCALE: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 80;

const JITTER_TAG: u64 = 0x6a69_7474_6572;
const BOOTSTRAP_TAG: u64 = 0x626f_6f74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KLMethod {
    ClosedForm,
    KnnMc,
}

impl KLMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            KLMethod::ClosedForm => "closed_form",
            KLMethod::KnnMc => "knn_mc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KLEstimate {
    pub value: f64,
    /// Bootstrap standard error; `None` for closed-form values.
    pub std_error: Option<f64>,
    pub method: KLMethod,
    pub sample_count: Option<usize>,
    /// Set when coincident samples had to be separated.
    pub jittered: bool,
}

impl KLEstimate {
    pub fn se(&self) -> f64 {
        self.std_error.unwrap_or(0.0)
    }
}

/// `KL(N(mu_p, s_p I) || N(mu_q, s_q I))`.
pub fn gaussian_kl(mu_p: &[f64], s_p: f64, mu_q: &[f64], s_q: f64) -> Result<KLEstimate> {
    check_dim(mu_p.len(), mu_q.len())?;
    if !(s_p > 0.0 && s_q > 0.0 && s_p.is_finite() && s_q.is_finite()) {
        return Err(Error::domain(format!("variances must be positive, got {s_p} and {s_q}")));
    }
    let d = mu_p.len() as f64;
    let u = s_p / s_q - 1.0;
    let value = 0.5 * d * (u - u.ln_1p()) + sq_dist(mu_p, mu_q) / (2.0 * s_q);
    Ok(KLEstimate { value, std_error: None, method: KLMethod::ClosedForm, sample_count: None, jittered: false })
}

/// `ln V_d`, the log-volume of the unit ball in `R^d`.
pub fn ln_unit_ball_volume(d: usize) -> f64 {
    let mut v = if d % 2 == 0 { 1.0f64 } else { 2.0 };
    let mut k = if d % 2 == 0 { 2 } else { 3 };
    while k <= d {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k += 2;
    }
    v.ln()
}

/// `psi(m) - psi(1) = sum_{k=1}^{m-1} 1/k`.
fn digamma_offset(m: usize) -> f64 {
    (1..m).rev().map(|k| 1.0 / k as f64).sum()
}

fn nn_distances_k<const K: usize>(points: &[f64]) -> Vec<f64> {
    let pts: Vec<[f64; K]> = points.chunks_exact(K).map(|c| c.try_into().expect("chunk of length K")).collect();
    let tree: ImmutableKdTree<f64, K> = ImmutableKdTree::new_from_slice(&pts);
    let two = NonZeroUsize::new(2).expect("nonzero");
    pts.par_iter()
        .map(|q| {
            // the query itself is among the hits at distance 0
            tree.nearest_n::<SquaredEuclidean>(q, two).iter().map(|n| n.distance).fold(0.0, f64::max).sqrt()
        })
        .collect()
}

macro_rules! dispatch_dim {
    ($d:expr, $points:expr, $($k:literal)*) => {
        match $d {
            $($k => nn_distances_k::<$k>($points),)*
            _ => unreachable!("dimension checked by caller"),
        }
    };
}

/// Distance from each point to its nearest other point.
pub fn nearest_neighbour_distances(points: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim > MAX_KNN_DIM {
        return Err(Error::Estimator(format!("nearest-neighbour search supports 1 <= d <= {MAX_KNN_DIM}, got {dim}")));
    }
    if points.len() % dim != 0 {
        return Err(Error::domain("point buffer length is not a multiple of the dimension"));
    }
    Ok(dispatch_dim!(dim, points, 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16))
}

/// Nearest-neighbour estimate of `KL(p || q)` from `p`-samples (row-major,
/// `dim` columns) and the exact `ln q`. The bootstrap draws from `seed`.
pub fn knn_kl<F>(samples: &[f64], dim: usize, log_q: F, seed: u64) -> Result<KLEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if dim == 0 || samples.len() % dim != 0 {
        return Err(Error::domain("sample buffer length is not a multiple of the dimension"));
    }
    let m = samples.len() / dim;
    if m < MIN_KNN_SAMPLES {
        return Err(Error::precondition(format!("knn_kl needs at least {MIN_KNN_SAMPLES} samples, got {m}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("samples must be finite"));
    }
    let mut points = samples.to_vec();
    let mut rho = nearest_neighbour_distances(&points, dim)?;
    let mut jittered = false;
    for round in 0..8u64 {
        if rho.iter().all(|&r| r > 0.0) {
            break;
        }
        jittered = true;
        let mut rng = aux_rng(seed, JITTER_TAG + round);
        for (i, r) in rho.iter().enumerate() {
            if *r == 0.0 {
                for x in &mut points[i * dim..(i + 1) * dim] {
                    let u: f64 = rng.random_range(-1.0..1.0);
                    *x += JITTER_SCALE * x.abs().max(1.0) * u;
                }
            }
        }
        rho = nearest_neighbour_distances(&points, dim)?;
    }
    if rho.iter().any(|&r| r <= 0.0) {
        return Err(Error::Estimator("coincident samples remain after jitter".into()));
    }

    let d = dim as f64;
    let terms: Vec<f64> =
        points.par_chunks_exact(dim).zip(rho.par_iter()).map(|(x, &r)| -d * r.ln() - log_q(x)).collect();
    if let Some(bad) = terms.iter().find(|v| !v.is_finite()) {
        return Err(Error::Estimator(format!("non-finite per-sample term {bad}; is ln q finite on the samples?")));
    }
    let mean = terms.iter().sum::<f64>() / m as f64;
    let value = mean - ln_unit_ball_volume(dim) - digamma_offset(m);

    let boots: Vec<f64> = (0..BOOTSTRAP_RESAMPLES as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = aux_rng(seed, BOOTSTRAP_TAG + r);
            (0..m).map(|_| terms[rng.random_range(0..m)]).sum::<f64>() / m as f64
        })
        .collect();
    let bm = boots.iter().sum::<f64>() / boots.len() as f64;
    let var = boots.iter().map(|b| (b - bm) * (b - bm)).sum::<f64>() / (boots.len() - 1) as f64;

    Ok(KLEstimate { value, std_error: Some(var.sqrt()), method: KLMethod::KnnMc, sample_count: Some(m), jittered })
}

/// [`knn_kl`] of a sampler batch against a target density.
pub fn knn_kl_to_target(batch: &SampleBatch, target: &Target, seed: u64) -> Result<KLEstimate> {
    check_dim(target.dim(), batch.dim())?;
    knn_kl(batch.states(), batch.dim(), |x| target.log_density(x).unwrap_or(f64::NEG_INFINITY), seed)
}

/// Write KL rows as CSV `config_id,method,value,std_error,M`.
pub fn write_kl_csv<W: Write>(rows: &[(String, KLEstimate)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_id", "method", "value", "std_error", "M"])?;
    for (id, e) in rows {
        w.write_record([
            id.clone(),
            e.method.as_str().to_string(),
            fmt_f64(e.value),
            e.std_error.map(fmt_f64).unwrap_or_default(),
            e.sample_count.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CosSimHistogram {
    pub t: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Number of draws offered, including excluded ones.
    pub m: usize,
    /// Zero-norm draws, left out of `counts`.
    pub excluded: usize,
    /// Fraction of counted draws with cosine above 0.9.
    pub frac_above_0_9: f64,
}

impl CosSimHistogram {
    /// Binomial standard error of `frac_above_0_9`.
    pub fn frac_std_error(&self) -> f64 {
        let n = (self.m - self.excluded) as f64;
        let p = self.frac_above_0_9;
        (p * (1.0 - p) / n).sqrt()
    }

    /// Write as CSV `t,bin_left,bin_right,count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "bin_left", "bin_right", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([
                fmt_f64(self.t),
                fmt_f64(self.bin_edges[i]),
                fmt_f64(self.bin_edges[i + 1]),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Histogram of `cos(v_m, reference)` over `bins` uniform bins on `[-1, 1]`.
pub fn cosine_similarity_histogram(
    t: f64,
    draws: &[f64],
    dim: usize,
    reference: &[f64],
    bins: usize,
) -> Result<CosSimHistogram> {
    check_dim(dim, reference.len())?;
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    if draws.is_empty() || draws.len() % dim != 0 {
        return Err(Error::domain("draw buffer must hold at least one vector"));
    }
    let rnorm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rnorm == 0.0 || !rnorm.is_finite() {
        return Err(Error::domain("reference vector has zero norm"));
    }
    let mut counts = vec![0u64; bins];
    let mut excluded = 0;
    let mut above = 0usize;
    for v in draws.chunks_exact(dim) {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            excluded += 1;
            continue;
        }
        let dot: f64 = v.iter().zip(reference).map(|(a, b)| a * b).sum();
        let c = (dot / (n * rnorm)).clamp(-1.0, 1.0);
        if c > 0.9 {
            above += 1;
        }
        let idx = (((c + 1.0) / 2.0) * bins as f64).floor() as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    let m = draws.len() / dim;
    let counted = m - excluded;
    let bin_edges = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
    Ok(CosSimHistogram {
        t,
        bin_edges,
        counts,
        m,
        excluded,
        frac_above_0_9: if counted == 0 { 0.0 } else { above as f64 / counted as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{isotropic_log_density, GaussianMixtureTarget};
    use crate::rng::{fill_standard_normal, StreamKey};

    fn normal_samples(m: usize, dim: usize, mean: &[f64], std: f64, seed: u64) -> Vec<f64> {
        let mut rng = StreamKey::new(seed, 0, 0, 0).rng();
        let mut out = vec![0.0; m * dim];
        fill_standard_normal(&mut rng, &mut out);
        for x in out.chunks_exact_mut(dim) {
            for (a, b) in x.iter_mut().zip(mean) {
                *a = b + std * *a;
            }
        }
        out
    }

    #[test]
    fn gaussian_kl_examples() {
        assert_eq!(gaussian_kl(&[1.0, 2.0], 0.5, &[1.0, 2.0], 0.5).unwrap().value, 0.0);
        let v = gaussian_kl(&[0.0], 0.25, &[0.0], 1.0).unwrap().value;
        assert!((v - 0.5 * (0.25 - 1.0 - 0.25f64.ln())).abs() < 1e-15);
        assert!((v - crate::recursion::variance_ratio_kl(0.25, 1)).abs() < 1e-15);
        for d in 1..5 {
            let mut e1 = vec![0.0; d];
            e1[0] = 1.0;
            let v = gaussian_kl(&e1, 1.0, &vec![0.0; d], 1.0).unwrap();
            assert_eq!(v.value, 0.5);
            assert!(v.std_error.is_none());
        }
        // asymmetric in the variances
        let a = gaussian_kl(&[0.0], 0.25, &[0.0], 1.0).unwrap().value;
        let b = gaussian_kl(&[0.0], 1.0, &[0.0], 0.25).unwrap().value;
        assert!((a - b).abs() > 0.1);
        assert!(gaussian_kl(&[0.0], 0.0, &[0.0], 1.0).is_err());
        assert!(gaussian_kl(&[0.0], 1.0, &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn unit_ball_volumes() {
        let pi = std::f64::consts::PI;
        let expect = [2.0, pi, 4.0 / 3.0 * pi, pi * pi / 2.0, 8.0 * pi * pi / 15.0];
        for (d, v) in expect.iter().enumerate() {
            assert!((ln_unit_ball_volume(d + 1) - v.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn nn_distances_brute_force() {
        let pts = normal_samples(300, 3, &[0.0; 3], 1.0, 2);
        let fast = nearest_neighbour_distances(&pts, 3).unwrap();
        for (i, x) in pts.chunks_exact(3).enumerate() {
            let best = pts
                .chunks_exact(3)
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, y)| sq_dist(x, y))
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            assert!((fast[i] - best).abs() <= 1e-12 * best.max(1.0));
        }
    }

    #[test]
    fn knn_same_distribution() {
        let x = normal_samples(100_000, 2, &[0.0, 0.0], 1.0, 1);
        let e = knn_kl(&x, 2, |v| isotropic_log_density(v, &[0.0, 0.0], 1.0), 0).unwrap();
        assert!(e.value.abs() < 0.01, "{e:?}");
        assert!(!e.jittered);
    }

    #[test]
    fn knn_narrow_vs_wide() {
        let x = normal_samples(100_000, 1, &[0.0], 0.5, 3);
        let e = knn_kl(&x, 1, |v| isotropic_log_density(v, &[0.0], 1.0), 0).unwrap();
        let truth = 0.5 * (0.25 - 1.0 - 0.25f64.ln());
        assert!((e.value - truth).abs() < 3.0 * e.se(), "{e:?} vs {truth}");
    }

    #[test]
    fn knn_one_mode_of_separated_pair() {
        let m = GaussianMixtureTarget::equal_weights(vec![vec![-20.0], vec![20.0]], 1.0).unwrap();
        let x = normal_samples(100_000, 1, &[-20.0], 1.0, 4);
        let e = knn_kl(&x, 1, |v| m.log_density(v).unwrap(), 0).unwrap();
        assert!((e.value - 2f64.ln()).abs() < 3.0 * e.se(), "{e:?}");
    }

    #[test]
    fn knn_duplicates_are_jittered() {
        let mut x = normal_samples(2000, 1, &[0.0], 1.0, 5);
        x[1] = x[0];
        x[7] = x[0];
        let e = knn_kl(&x, 1, |v| isotropic_log_density(v, &[0.0], 1.0), 0).unwrap();
        assert!(e.jittered);
        assert!(e.value.is_finite());
    }

    #[test]
    fn knn_permutation_invariant() {
        let x = normal_samples(3000, 2, &[0.0, 0.0], 1.0, 6);
        let mut rev: Vec<f64> = Vec::with_capacity(x.len());
        for c in x.chunks_exact(2).rev() {
            rev.extend_from_slice(c);
        }
        let q = |v: &[f64]| isotropic_log_density(v, &[0.0, 0.0], 1.0);
        let a = knn_kl(&x, 2, q, 0).unwrap();
        let b = knn_kl(&rev, 2, q, 0).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn knn_preconditions() {
        let x = normal_samples(10, 1, &[0.0], 1.0, 7);
        assert!(matches!(knn_kl(&x, 1, |_| 0.0, 0), Err(Error::Precondition(_))));
        let x = normal_samples(1000, 17, &[0.0; 17], 1.0, 7);
        assert!(knn_kl(&x, 17, |_| 0.0, 0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let r = [1.0, 2.0];
        let draws: Vec<f64> = (0..10).flat_map(|_| r).collect();
        let h = cosine_similarity_histogram(0.5, &draws, 2, &r, DEFAULT_BINS).unwrap();
        assert_eq!(h.counts[DEFAULT_BINS - 1], 10);
        assert_eq!(h.frac_above_0_9, 1.0);
        assert_eq!(h.bin_edges.len(), DEFAULT_BINS + 1);
        assert_eq!(h.bin_edges[0], -1.0);
        assert_eq!(h.bin_edges[DEFAULT_BINS], 1.0);

        let draws = [1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 1.0];
        let h = cosine_similarity_histogram(0.0, &draws, 2, &[1.0, 0.0], 4).unwrap();
        assert_eq!(h.excluded, 1);
        assert_eq!(h.counts, vec![1, 0, 1, 1]);
        assert_eq!(h.counts.iter().sum::<u64>() as usize + h.excluded, h.m);

        assert!(cosine_similarity_histogram(0.0, &draws, 2, &[0.0, 0.0], 4).is_err());
    }
}
