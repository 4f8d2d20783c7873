//! C ABI over the `tmfm` library.
//!
//! Every function returns a [`TmfmStatus`]; results go through out-pointers.
//! On a non-zero status the message is available from
//! [`tmfm_last_error_message`] on the same thread. Targets are opaque handles
//! created by `tmfm_target_*_new` and released with [`tmfm_target_free`].

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use tmfm::harness::ComputeCostModel;
use tmfm::recursion::{fm_variance_trace, tm_variance_trace};
use tmfm::{
    path_coefficients, run_sampler, Error, GaussianMixtureTarget, InnerMode, MixtureComponent, SamplerKind, Schedule,
    Target, UnimodalGaussianTarget,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    BufferTooSmall = 4,
    Precondition = 5,
    Numerical = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmfmSampler {
    Fm = 0,
    TmEuler = 1,
    TmExact = 2,
}

impl TmfmSampler {
    fn kind(self) -> SamplerKind {
        match self {
            TmfmSampler::Fm => SamplerKind::Fm,
            TmfmSampler::TmEuler => SamplerKind::Tm(InnerMode::Euler),
            TmfmSampler::TmExact => SamplerKind::Tm(InnerMode::Exact),
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmfmCostPreset {
    Image = 0,
    Video = 1,
}

/// Path scalars at time `t`: `B`, `A`, `k = A / B`, `tau2 = sigma^2 / B`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TmfmPathCoefficients {
    pub t: f64,
    pub b: f64,
    pub a: f64,
    pub k: f64,
    pub tau2: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TmfmCostModel {
    pub c_backbone: f64,
    pub c_head: f64,
    pub kappa: f64,
}

/// Opaque target handle.
pub struct TmfmTarget {
    inner: Target,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TmfmStatus {
    match e {
        Error::Domain(_) | Error::InvalidTarget(_) | Error::InvalidSchedule(_) | Error::Config(_) => {
            TmfmStatus::InvalidArgument
        }
        Error::DimensionMismatch { .. } => TmfmStatus::DimensionMismatch,
        Error::Precondition(_) | Error::PastEnd { .. } => TmfmStatus::Precondition,
        Error::Consistency(_) | Error::Estimator(_) | Error::Io(_) => TmfmStatus::Numerical,
    }
}

struct Fail(TmfmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TmfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TmfmStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside tmfm".into());
            TmfmStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(TmfmStatus::NullPointer, format!("{name} is null"))
}

unsafe fn input<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a>(ptr: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(name))
}

unsafe fn target_ref<'a>(ptr: *const TmfmTarget) -> Result<&'a Target, Fail> {
    ptr.as_ref().map(|t| &t.inner).ok_or_else(|| null("target"))
}

fn need(len: usize, want: usize, name: &str) -> Result<(), Fail> {
    if len < want {
        Err(Fail(TmfmStatus::BufferTooSmall, format!("{name} holds {len} values, need {want}")))
    } else {
        Ok(())
    }
}

/// Copy the calling thread's last error message, NUL-terminated and
/// truncated to `cap` bytes. Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tmfm_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Target `N(mu, sigma^2 I_d)`.
///
/// # Safety
/// `mu` must point to `d` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmfm_target_unimodal_new(
    mu: *const f64,
    d: usize,
    sigma: f64,
    out: *mut *mut TmfmTarget,
) -> TmfmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let mu = input(mu, d, "mu")?;
        let t = UnimodalGaussianTarget::new(mu.to_vec(), sigma)?;
        *out = Box::into_raw(Box::new(TmfmTarget { inner: Target::Unimodal(t) }));
        Ok(())
    })
}

/// Mixture of `k` isotropic components; `means` is row-major `k x d`.
///
/// # Safety
/// `weights` and `sigmas` must point to `k` doubles, `means` to `k * d`;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmfm_target_mixture_new(
    weights: *const f64,
    means: *const f64,
    sigmas: *const f64,
    k: usize,
    d: usize,
    out: *mut *mut TmfmTarget,
) -> TmfmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let w = input(weights, k, "weights")?;
        let s = input(sigmas, k, "sigmas")?;
        let m = input(means, k * d, "means")?;
        if d == 0 {
            return Err(Fail(TmfmStatus::InvalidArgument, "dimension must be at least 1".into()));
        }
        let comps = (0..k)
            .map(|j| MixtureComponent { weight: w[j], mean: m[j * d..(j + 1) * d].to_vec(), sigma: s[j] })
            .collect();
        let t = GaussianMixtureTarget::new(comps)?;
        *out = Box::into_raw(Box::new(TmfmTarget { inner: Target::Mixture(t) }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `target` must be null or a handle from `tmfm_target_*_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmfm_target_free(target: *mut TmfmTarget) {
    if !target.is_null() {
        drop(Box::from_raw(target));
    }
}

/// # Safety
/// `target` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmfm_target_dim(target: *const TmfmTarget, out: *mut usize) -> TmfmStatus {
    guard(|| {
        *out_ref(out, "out")? = target_ref(target)?.dim();
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmfm_path_coefficients(t: f64, sigma: f64, out: *mut TmfmPathCoefficients) -> TmfmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let c = path_coefficients(t, sigma)?;
        *out = TmfmPathCoefficients { t: c.t, b: c.b, a: c.a, k: c.k, tau2: c.tau2 };
        Ok(())
    })
}

/// Posterior responsibilities `w_t(x, j)`; a unimodal target gives `[1]`.
///
/// # Safety
/// `x` must point to `d` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tmfm_responsibilities(
    target: *const TmfmTarget,
    t: f64,
    x: *const f64,
    d: usize,
    out: *mut f64,
    out_len: usize,
) -> TmfmStatus {
    guard(|| {
        let mix = target_ref(target)?.to_mixture();
        let x = input(x, d, "x")?;
        let w = tmfm::responsibilities(&mix, t, x)?;
        need(out_len, w.len(), "out")?;
        output(out, out_len, "out")?[..w.len()].copy_from_slice(&w);
        Ok(())
    })
}

/// `E[V | X_t = x]`, the exact FM velocity.
///
/// # Safety
/// `x` and `out` must each point to `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn tmfm_conditional_mean(
    target: *const TmfmTarget,
    t: f64,
    x: *const f64,
    d: usize,
    out: *mut f64,
) -> TmfmStatus {
    guard(|| {
        let v = target_ref(target)?.conditional_mean(t, input(x, d, "x")?)?;
        output(out, d, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Closed-form per-step variances `s_n`, `n = 0..=N`, for FM and TM on
/// `N(mu, sigma^2 I_d)`. Both buffers need `N + 1` entries; `s_tm` may be
/// null when only FM is wanted. `sampler` selects the TM inner mode and is
/// ignored for `s_fm`.
///
/// # Safety
/// Non-null buffers must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tmfm_variance_trace(
    sigma: f64,
    n_outer: usize,
    n_inner: usize,
    sampler: TmfmSampler,
    s_fm: *mut f64,
    s_tm: *mut f64,
    len: usize,
) -> TmfmStatus {
    guard(|| {
        need(len, n_outer + 1, "trace buffers")?;
        let trace = match sampler {
            TmfmSampler::Fm => fm_variance_trace(sigma, n_outer, 1)?,
            TmfmSampler::TmEuler => tm_variance_trace(sigma, &Schedule::new(n_outer, n_inner)?, InnerMode::Euler, 1)?,
            TmfmSampler::TmExact => tm_variance_trace(sigma, &Schedule::new(n_outer, n_inner)?, InnerMode::Exact, 1)?,
        };
        let fm = output(s_fm, len, "s_fm")?;
        for (o, r) in fm.iter_mut().zip(&trace.rows) {
            *o = r.s_fm;
        }
        if !s_tm.is_null() {
            let tm = output(s_tm, len, "s_tm")?;
            for (o, r) in tm.iter_mut().zip(&trace.rows) {
                *o = r.s_tm.unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}

/// `KL(N(mu_p, s_p I_d) || N(mu_q, s_q I_d))`.
///
/// # Safety
/// `mu_p` and `mu_q` must point to `d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmfm_gaussian_kl(
    mu_p: *const f64,
    s_p: f64,
    mu_q: *const f64,
    s_q: f64,
    d: usize,
    out: *mut f64,
) -> TmfmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = tmfm::divergence::gaussian_kl(input(mu_p, d, "mu_p")?, s_p, input(mu_q, d, "mu_q")?, s_q)?.value;
        Ok(())
    })
}

/// Run `m` trajectories to `t = 1` and write the final states row-major
/// into `out` (`m * d` doubles). `n_inner` is ignored for FM.
///
/// # Safety
/// `target` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tmfm_run_sampler(
    target: *const TmfmTarget,
    sampler: TmfmSampler,
    n_outer: usize,
    n_inner: usize,
    m: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> TmfmStatus {
    guard(|| {
        let target = target_ref(target)?;
        need(out_len, m * target.dim(), "out")?;
        let out = output(out, out_len, "out")?;
        let inner = if sampler == TmfmSampler::TmEuler { n_inner } else { 1 };
        let run = run_sampler(target, sampler.kind(), &Schedule::new(n_outer, inner)?, m, seed, false)?;
        let states = run.final_batch.states();
        out[..states.len()].copy_from_slice(states);
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmfm_cost_model_preset(preset: TmfmCostPreset, out: *mut TmfmCostModel) -> TmfmStatus {
    guard(|| {
        let m = match preset {
            TmfmCostPreset::Image => ComputeCostModel::image(),
            TmfmCostPreset::Video => ComputeCostModel::video(),
        };
        *out_ref(out, "out")? = TmfmCostModel { c_backbone: m.c_backbone, c_head: m.c_head, kappa: m.kappa };
        Ok(())
    })
}

fn cost_model(m: &TmfmCostModel) -> ComputeCostModel {
    ComputeCostModel { c_backbone: m.c_backbone, c_head: m.c_head, kappa: m.kappa }
}

fn check_model(m: &TmfmCostModel) -> Result<(), Fail> {
    if m.c_backbone > 0.0 && m.c_head > 0.0 && m.kappa > 0.0 {
        Ok(())
    } else {
        Err(Fail(TmfmStatus::InvalidArgument, "cost model entries must be positive".into()))
    }
}

/// Modeled cost `N C_B` (FM) or `N C_B + N S C_H` (TM).
///
/// # Safety
/// `model` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tmfm_cost(
    model: *const TmfmCostModel,
    sampler: TmfmSampler,
    n_outer: usize,
    n_inner: usize,
    out: *mut f64,
) -> TmfmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        check_model(model)?;
        *out_ref(out, "out")? = cost_model(model).cost(sampler.kind(), n_outer, n_inner)?;
        Ok(())
    })
}

/// `kappa / N`, not rounded.
///
/// # Safety
/// `model` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tmfm_delta_inner_steps(
    model: *const TmfmCostModel,
    n_outer: f64,
    out: *mut f64,
) -> TmfmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        check_model(model)?;
        *out_ref(out, "out")? = cost_model(model).delta_inner_steps(n_outer)?;
        Ok(())
    })
}
