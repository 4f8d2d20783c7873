//! Monte Carlo FM and TM samplers driven by the exact posterior oracles.
//!
//! FM: `x <- x + dt E[V | X_{t_n} = x]`.
//!
//! TM: `x <- x + dt V~`, where `V~` is either an exact posterior draw or the
//! output of `S` inner Euler steps `v <- v + ds u(v | s)` started from fresh
//! `N(0, I)` noise. The inner velocity `u` is the conditional-mean velocity of
//! the CondOT problem whose target is the posterior of `V` given `x`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{GaussianMixtureTarget, Schedule, Target, UnimodalGaussianTarget};
use crate::posterior::{
    component_posterior_into, conditional_mean_into, mixture_posterior_into, DifferenceLaw, IsoComponents,
    MixturePosterior, UnimodalPosterior,
};
use crate::rng::{fill_standard_normal, StreamKey, INIT_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    /// `S` inner Euler steps, `S` taken from the schedule.
    Euler,
    /// Direct draw from the posterior (the `S -> inf` limit).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Fm,
    Tm(InnerMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SeedInfo {
    pub master_seed: u64,
    /// Trajectory `i` of the batch uses stream id `trajectory_offset + i`.
    pub trajectory_offset: u64,
}

impl SeedInfo {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed, trajectory_offset: 0 }
    }

    fn key(&self, i: usize, outer_step: u64) -> StreamKey {
        StreamKey::new(self.master_seed, self.trajectory_offset + i as u64, outer_step, 0)
    }
}

/// `M` states of dimension `d` at outer step `t_index`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    t_index: usize,
    dim: usize,
    states: Vec<f64>,
    seed_info: SeedInfo,
}

impl SampleBatch {
    pub fn new(t_index: usize, dim: usize, states: Vec<f64>, seed_info: SeedInfo) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("dimension must be at least 1"));
        }
        if states.is_empty() || states.len() % dim != 0 {
            return Err(Error::domain(format!(
                "state buffer of length {} does not hold a positive number of {dim}-vectors",
                states.len()
            )));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("states must be finite"));
        }
        Ok(Self { t_index, dim, states, seed_info })
    }

    /// Batch at `t = 0` from vectors of equal length.
    pub fn from_vectors(rows: &[Vec<f64>], seed_info: SeedInfo) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        for r in rows {
            check_dim(dim, r.len())?;
        }
        Self::new(0, dim, rows.concat(), seed_info)
    }

    /// `M` draws of `X0 ~ N(0, I_d)`, each from its trajectory's init stream.
    pub fn initial(dim: usize, m: usize, seed_info: SeedInfo) -> Result<Self> {
        if dim == 0 || m == 0 {
            return Err(Error::precondition("initial batch needs d >= 1 and M >= 1"));
        }
        let mut states = vec![0.0; dim * m];
        states.par_chunks_mut(dim).enumerate().for_each(|(i, x)| {
            let mut rng = seed_info.key(i, INIT_STEP).rng();
            fill_standard_normal(&mut rng, x);
        });
        Ok(Self { t_index: 0, dim, states, seed_info })
    }

    pub fn t_index(&self) -> usize {
        self.t_index
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn seed_info(&self) -> SeedInfo {
        self.seed_info
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn into_states(self) -> Vec<f64> {
        self.states
    }

    /// Per-coordinate sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for x in self.iter() {
            for (a, b) in m.iter_mut().zip(x) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Per-coordinate unbiased sample variance (zero for a single state).
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut v = vec![0.0; self.dim];
        for x in self.iter() {
            for ((a, b), m) in v.iter_mut().zip(x).zip(&mean) {
                *a += (b - m) * (b - m);
            }
        }
        let denom = (self.len().max(2) - 1) as f64;
        v.iter_mut().for_each(|a| *a /= denom);
        v
    }

    /// Sample variance averaged over coordinates.
    pub fn mean_variance(&self) -> f64 {
        self.variance().iter().sum::<f64>() / self.dim as f64
    }
}

/// Per-step summary recorded by [`run_sampler`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub n: usize,
    pub t: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl StepStats {
    fn of(batch: &SampleBatch, schedule: &Schedule) -> Self {
        Self { n: batch.t_index, t: schedule.time(batch.t_index), mean: batch.mean(), variance: batch.variance() }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerRun {
    pub final_batch: SampleBatch,
    /// Batches at `t_0, ..., t_N` when recording was requested.
    pub snapshots: Vec<SampleBatch>,
    /// Mean and variance at `t_0, ..., t_N`.
    pub stats: Vec<StepStats>,
}

/// Source of per-point posteriors for the TM inner problem.
trait PosteriorOracle: IsoComponents + Sync {
    type Post: IsoComponents + DifferenceLaw + Send;
    fn empty_posterior(&self, d: usize) -> Self::Post;
    fn posterior_into(&self, t: f64, x: &[f64], out: &mut Self::Post);
}

impl PosteriorOracle for UnimodalGaussianTarget {
    type Post = UnimodalPosterior;

    fn empty_posterior(&self, d: usize) -> UnimodalPosterior {
        UnimodalPosterior { mean: vec![0.0; d], tau2: 0.0 }
    }

    fn posterior_into(&self, t: f64, x: &[f64], out: &mut UnimodalPosterior) {
        out.tau2 = component_posterior_into(self.mean(), self.variance(), t, x, &mut out.mean);
    }
}

impl PosteriorOracle for GaussianMixtureTarget {
    type Post = MixturePosterior;

    fn empty_posterior(&self, _: usize) -> MixturePosterior {
        MixturePosterior::default()
    }

    fn posterior_into(&self, t: f64, x: &[f64], out: &mut MixturePosterior) {
        mixture_posterior_into(self, t, x, out);
    }
}

struct Scratch<P> {
    v: Vec<f64>,
    vel: Vec<f64>,
    logw: Vec<f64>,
    post: P,
}

/// One TM difference draw `V~` into `v`.
fn tm_draw<P, R>(
    post: &P,
    mode: InnerMode,
    steps: usize,
    rng: &mut R,
    v: &mut [f64],
    vel: &mut [f64],
    logw: &mut Vec<f64>,
) where
    P: IsoComponents + DifferenceLaw,
    R: Rng + ?Sized,
{
    match mode {
        InnerMode::Exact => post.sample_into(rng, v),
        InnerMode::Euler => {
            fill_standard_normal(rng, v);
            let ds = 1.0 / steps as f64;
            for s in 0..steps {
                let st = s as f64 / steps as f64;
                conditional_mean_into(post, st, v, vel, logw);
                for (a, b) in v.iter_mut().zip(vel.iter()) {
                    *a += ds * b;
                }
            }
        }
    }
}

fn advance_with<O: PosteriorOracle>(oracle: &O, kind: SamplerKind, schedule: &Schedule, batch: &mut SampleBatch) {
    let n = batch.t_index;
    let t = schedule.time(n);
    let dt = schedule.dt();
    let steps = schedule.n_inner();
    let d = batch.dim;
    let seed = batch.seed_info;
    batch.states.par_chunks_mut(d).enumerate().for_each_init(
        || Scratch { v: vec![0.0; d], vel: vec![0.0; d], logw: Vec::new(), post: oracle.empty_posterior(d) },
        |sc, (i, x)| {
            match kind {
                SamplerKind::Fm => conditional_mean_into(oracle, t, x, &mut sc.v, &mut sc.logw),
                SamplerKind::Tm(mode) => {
                    oracle.posterior_into(t, x, &mut sc.post);
                    let mut rng = seed.key(i, n as u64).rng();
                    tm_draw(&sc.post, mode, steps, &mut rng, &mut sc.v, &mut sc.vel, &mut sc.logw);
                }
            }
            for (a, b) in x.iter_mut().zip(&sc.v) {
                *a += dt * b;
            }
        },
    );
    batch.t_index += 1;
}

fn advance(target: &Target, kind: SamplerKind, schedule: &Schedule, batch: &mut SampleBatch) -> Result<()> {
    check_dim(target.dim(), batch.dim)?;
    if batch.t_index >= schedule.n_outer() {
        return Err(Error::PastEnd { step: batch.t_index, n_outer: schedule.n_outer() });
    }
    match target {
        Target::Unimodal(u) => advance_with(u, kind, schedule, batch),
        Target::Mixture(m) => advance_with(m, kind, schedule, batch),
    }
    if batch.states.iter().any(|v| !v.is_finite()) {
        return Err(Error::Consistency(format!("non-finite state after step {}", batch.t_index)));
    }
    Ok(())
}

/// One FM Euler step with the exact conditional-mean velocity.
pub fn fm_step(target: &Target, batch: &SampleBatch, schedule: &Schedule) -> Result<SampleBatch> {
    let mut next = batch.clone();
    advance(target, SamplerKind::Fm, schedule, &mut next)?;
    Ok(next)
}

/// One TM outer step; the inner solve uses `schedule.n_inner()` steps.
pub fn tm_step(target: &Target, batch: &SampleBatch, schedule: &Schedule, mode: InnerMode) -> Result<SampleBatch> {
    let mut next = batch.clone();
    advance(target, SamplerKind::Tm(mode), schedule, &mut next)?;
    Ok(next)
}

/// Run `N` outer steps from `initial` (which must be at `t = 0`).
pub fn run_from(
    target: &Target,
    kind: SamplerKind,
    schedule: &Schedule,
    initial: SampleBatch,
    record: bool,
) -> Result<SamplerRun> {
    if initial.t_index != 0 {
        return Err(Error::Config(format!("initial batch is at step {}, expected 0", initial.t_index)));
    }
    check_dim(target.dim(), initial.dim)?;
    let mut batch = initial;
    let mut snapshots = Vec::new();
    let mut stats = Vec::with_capacity(schedule.n_outer() + 1);
    stats.push(StepStats::of(&batch, schedule));
    if record {
        snapshots.push(batch.clone());
    }
    for _ in 0..schedule.n_outer() {
        advance(target, kind, schedule, &mut batch)?;
        stats.push(StepStats::of(&batch, schedule));
        if record {
            snapshots.push(batch.clone());
        }
    }
    Ok(SamplerRun { final_batch: batch, snapshots, stats })
}

/// Draw `M` initial states from `seed` and run the sampler to `t = 1`.
pub fn run_sampler(
    target: &Target,
    kind: SamplerKind,
    schedule: &Schedule,
    m: usize,
    seed: u64,
    record: bool,
) -> Result<SamplerRun> {
    if m == 0 {
        return Err(Error::Config("trajectory count M must be at least 1".into()));
    }
    let initial = SampleBatch::initial(target.dim(), m, SeedInfo::new(seed))?;
    run_from(target, kind, schedule, initial, record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::unimodal_posterior;

    fn unimodal(mu: Vec<f64>, sigma: f64) -> Target {
        UnimodalGaussianTarget::new(mu, sigma).unwrap().into()
    }

    #[test]
    fn fm_single_step_collapses_to_mean() {
        let target = unimodal(vec![0.0, 0.0], 1.0);
        let sched = Schedule::outer(1).unwrap();
        let b = SampleBatch::from_vectors(&[vec![0.3, -2.0], vec![5.0, 1.0]], SeedInfo::new(0)).unwrap();
        let out = fm_step(&target, &b, &sched).unwrap();
        assert_eq!(out.t_index(), 1);
        assert!(out.states().iter().all(|v| *v == 0.0));
        assert!(matches!(fm_step(&target, &out, &sched), Err(Error::PastEnd { step: 1, n_outer: 1 })));

        let target = unimodal(vec![1.5, -0.5], 0.7);
        let run = run_sampler(&target, SamplerKind::Fm, &sched, 10, 4, false).unwrap();
        for x in run.final_batch.iter() {
            assert!((x[0] - 1.5).abs() < 1e-15 && (x[1] + 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn fm_symmetric_pair_stays_on_axis() {
        let m = GaussianMixtureTarget::equal_weights(vec![vec![-2.0, 0.0], vec![2.0, 0.0]], 0.5).unwrap();
        let target: Target = m.into();
        let sched = Schedule::outer(8).unwrap();
        let start = SampleBatch::from_vectors(&[vec![0.0, 0.0], vec![0.0, 1.3]], SeedInfo::new(0)).unwrap();
        let run = run_from(&target, SamplerKind::Fm, &sched, start, false).unwrap();
        assert_eq!(run.final_batch.state(0)[0], 0.0);
        assert_eq!(run.final_batch.state(1)[0], 0.0);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let m = GaussianMixtureTarget::equal_weights(vec![vec![-1.0], vec![1.0]], 0.3).unwrap();
        let target: Target = m.into();
        let sched = Schedule::new(4, 3).unwrap();
        for kind in [SamplerKind::Fm, SamplerKind::Tm(InnerMode::Euler), SamplerKind::Tm(InnerMode::Exact)] {
            let a = run_sampler(&target, kind, &sched, 500, 11, false).unwrap();
            let b = run_sampler(&target, kind, &sched, 500, 11, false).unwrap();
            assert_eq!(a.final_batch, b.final_batch);
            let c = run_sampler(&target, kind, &sched, 500, 12, false).unwrap();
            assert_ne!(a.final_batch, c.final_batch);
        }
    }

    #[test]
    fn fm_ignores_seed_given_initial_batch() {
        let target = unimodal(vec![0.4], 0.6);
        let sched = Schedule::outer(5).unwrap();
        let init = SampleBatch::initial(1, 50, SeedInfo::new(1)).unwrap();
        let mut other = init.clone();
        other.seed_info = SeedInfo::new(99);
        let a = run_from(&target, SamplerKind::Fm, &sched, init, false).unwrap();
        let b = run_from(&target, SamplerKind::Fm, &sched, other, false).unwrap();
        assert_eq!(a.final_batch.states(), b.final_batch.states());
    }

    #[test]
    fn single_inner_step_returns_posterior_mean() {
        // one inner Euler step from v0: v0 + (E[V|x] - v0) = E[V|x]
        let target = unimodal(vec![0.5, -1.0], 0.8);
        let u = match &target {
            Target::Unimodal(u) => u.clone(),
            _ => unreachable!(),
        };
        let sched = Schedule::new(3, 1).unwrap();
        let b = SampleBatch::initial(2, 20, SeedInfo::new(5)).unwrap();
        let b = fm_step(&target, &b, &sched).unwrap();
        let tm = tm_step(&target, &b, &sched, InnerMode::Euler).unwrap();
        let fm = fm_step(&target, &b, &sched).unwrap();
        let t = sched.time(1);
        for (i, (xt, xf)) in tm.iter().zip(fm.iter()).enumerate() {
            let post = unimodal_posterior(&u, t, b.state(i)).unwrap();
            for j in 0..2 {
                let by_hand = b.state(i)[j] + sched.dt() * post.mean[j];
                assert!((xt[j] - by_hand).abs() < 1e-14);
                assert!((xf[j] - by_hand).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn exact_mixture_weights_match_prior() {
        let pi = [0.3, 0.7];
        let m = GaussianMixtureTarget::new(vec![
            crate::gaussian::MixtureComponent { weight: pi[0], mean: vec![-20.0], sigma: 0.5 },
            crate::gaussian::MixtureComponent { weight: pi[1], mean: vec![20.0], sigma: 0.5 },
        ])
        .unwrap();
        let target: Target = m.into();
        let n = 20_000;
        let run =
            run_sampler(&target, SamplerKind::Tm(InnerMode::Exact), &Schedule::outer(4).unwrap(), n, 3, false).unwrap();
        let frac = run.final_batch.iter().filter(|x| x[0] < 0.0).count() as f64 / n as f64;
        let se = (pi[0] * pi[1] / n as f64).sqrt();
        assert!((frac - pi[0]).abs() < 3.0 * se, "frac {frac}");
    }

    #[test]
    fn stats_and_snapshots_cover_every_step() {
        let target = unimodal(vec![1.0], 1.0);
        let sched = Schedule::new(3, 2).unwrap();
        let run = run_sampler(&target, SamplerKind::Tm(InnerMode::Euler), &sched, 100, 0, true).unwrap();
        assert_eq!(run.stats.len(), 4);
        assert_eq!(run.snapshots.len(), 4);
        assert_eq!(run.stats[3].t, 1.0);
        assert_eq!(run.snapshots[3], run.final_batch);
    }

    #[test]
    fn batch_validation() {
        assert!(SampleBatch::new(0, 2, vec![1.0, 2.0, 3.0], SeedInfo::new(0)).is_err());
        assert!(SampleBatch::new(0, 1, vec![f64::NAN], SeedInfo::new(0)).is_err());
        assert!(SampleBatch::new(0, 1, vec![], SeedInfo::new(0)).is_err());
        let target = unimodal(vec![0.0], 1.0);
        assert!(run_sampler(&target, SamplerKind::Fm, &Schedule::outer(2).unwrap(), 0, 0, false).is_err());
        let b = SampleBatch::new(0, 2, vec![0.0; 4], SeedInfo::new(0)).unwrap();
        assert!(matches!(fm_step(&target, &b, &Schedule::outer(2).unwrap()), Err(Error::DimensionMismatch { .. })));
    }
}
