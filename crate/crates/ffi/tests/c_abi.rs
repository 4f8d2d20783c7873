use std::ffi::c_char;
use std::path::Path;
use std::process::Command;
use std::ptr;

use tmfm_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    let n = unsafe { tmfm_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn unimodal(mu: &[f64], sigma: f64) -> *mut TmfmTarget {
    let mut h = ptr::null_mut();
    let st = unsafe { tmfm_target_unimodal_new(mu.as_ptr(), mu.len(), sigma, &mut h) };
    assert_eq!(st, TmfmStatus::Ok);
    h
}

#[test]
fn path_coefficients_at_midpoint() {
    let mut c = TmfmPathCoefficients::default();
    assert_eq!(unsafe { tmfm_path_coefficients(0.5, 1.0, &mut c) }, TmfmStatus::Ok);
    assert_eq!((c.b, c.a, c.k, c.tau2), (0.5, 0.0, 0.0, 2.0));
    assert_eq!(unsafe { tmfm_path_coefficients(1.5, 1.0, &mut c) }, TmfmStatus::InvalidArgument);
    assert!(last_error().contains("1.5"));
    assert_eq!(unsafe { tmfm_path_coefficients(0.5, 1.0, ptr::null_mut()) }, TmfmStatus::NullPointer);
}

#[test]
fn target_handles_and_queries() {
    let h = unimodal(&[1.0, -2.0], 0.5);
    let mut d = 0usize;
    assert_eq!(unsafe { tmfm_target_dim(h, &mut d) }, TmfmStatus::Ok);
    assert_eq!(d, 2);
    let x = [0.0, 0.0];
    let mut v = [0.0; 2];
    assert_eq!(unsafe { tmfm_conditional_mean(h, 0.0, x.as_ptr(), 2, v.as_mut_ptr()) }, TmfmStatus::Ok);
    // at t = 0, E[V | x] = mu - x
    assert_eq!(v, [1.0, -2.0]);
    let mut w = [0.0; 1];
    assert_eq!(unsafe { tmfm_responsibilities(h, 0.3, x.as_ptr(), 2, w.as_mut_ptr(), 1) }, TmfmStatus::Ok);
    assert_eq!(w, [1.0]);
    assert_eq!(unsafe { tmfm_conditional_mean(h, 0.0, x.as_ptr(), 1, v.as_mut_ptr()) }, TmfmStatus::DimensionMismatch);
    unsafe { tmfm_target_free(h) };
    unsafe { tmfm_target_free(ptr::null_mut()) };
}

#[test]
fn mixture_responsibilities_sum_to_one() {
    let weights = [0.25, 0.75];
    let means = [-3.0, 0.0, 3.0, 0.0];
    let sigmas = [1.0, 1.0];
    let mut h = ptr::null_mut();
    let st = unsafe { tmfm_target_mixture_new(weights.as_ptr(), means.as_ptr(), sigmas.as_ptr(), 2, 2, &mut h) };
    assert_eq!(st, TmfmStatus::Ok);
    let x = [0.0, 0.0];
    let mut w = [0.0; 2];
    assert_eq!(unsafe { tmfm_responsibilities(h, 0.5, x.as_ptr(), 2, w.as_mut_ptr(), 2) }, TmfmStatus::Ok);
    // equidistant from both scaled means, so w equals the prior
    assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
    assert_eq!(unsafe { tmfm_responsibilities(h, 0.5, x.as_ptr(), 2, w.as_mut_ptr(), 1) }, TmfmStatus::BufferTooSmall);
    unsafe { tmfm_target_free(h) };

    let bad = [0.5, 0.6];
    let st = unsafe { tmfm_target_mixture_new(bad.as_ptr(), means.as_ptr(), sigmas.as_ptr(), 2, 2, &mut h) };
    assert_eq!(st, TmfmStatus::InvalidArgument);
}

#[test]
fn variance_trace_and_kl() {
    let mut fm = [0.0; 3];
    let mut tm = [0.0; 3];
    let st = unsafe { tmfm_variance_trace(1.0, 2, 1, TmfmSampler::TmExact, fm.as_mut_ptr(), tm.as_mut_ptr(), 3) };
    assert_eq!(st, TmfmStatus::Ok);
    // FM at N = 2, sigma = 1: a_0 = 1/2, a_1 = 1; exact TM keeps s_n = B(t_n)
    assert_eq!(fm, [1.0, 0.25, 0.25]);
    assert!((tm[1] - 0.5).abs() < 1e-15 && (tm[2] - 1.0).abs() < 1e-15);
    let st = unsafe { tmfm_variance_trace(1.0, 4, 1, TmfmSampler::Fm, fm.as_mut_ptr(), ptr::null_mut(), 3) };
    assert_eq!(st, TmfmStatus::BufferTooSmall);

    let z = [0.0];
    let mut kl = 0.0;
    assert_eq!(unsafe { tmfm_gaussian_kl(z.as_ptr(), 0.5, z.as_ptr(), 1.0, 1, &mut kl) }, TmfmStatus::Ok);
    assert!((kl - 0.5 * (0.5 - 1.0 - 0.5f64.ln())).abs() < 1e-15);
    assert_eq!(unsafe { tmfm_gaussian_kl(z.as_ptr(), 0.0, z.as_ptr(), 1.0, 1, &mut kl) }, TmfmStatus::InvalidArgument);
}

#[test]
fn sampler_is_deterministic() {
    let h = unimodal(&[2.0], 1.0);
    let mut a = vec![0.0; 64];
    let mut b = vec![0.0; 64];
    for out in [&mut a, &mut b] {
        let st = unsafe { tmfm_run_sampler(h, TmfmSampler::TmEuler, 2, 3, 64, 9, out.as_mut_ptr(), out.len()) };
        assert_eq!(st, TmfmStatus::Ok);
    }
    assert_eq!(a, b);
    let st = unsafe { tmfm_run_sampler(h, TmfmSampler::Fm, 0, 1, 64, 9, a.as_mut_ptr(), a.len()) };
    assert_eq!(st, TmfmStatus::InvalidArgument);
    unsafe { tmfm_target_free(h) };
}

#[test]
fn cost_model_presets() {
    let mut m = TmfmCostModel::default();
    assert_eq!(unsafe { tmfm_cost_model_preset(TmfmCostPreset::Image, &mut m) }, TmfmStatus::Ok);
    let mut c = 0.0;
    assert_eq!(unsafe { tmfm_cost(&m, TmfmSampler::TmEuler, 16, 8, &mut c) }, TmfmStatus::Ok);
    assert_eq!(c, 16.0 * 0.01120 + 128.0 * 0.00238);
    assert_eq!(unsafe { tmfm_cost(&m, TmfmSampler::Fm, 0, 1, &mut c) }, TmfmStatus::InvalidArgument);
    assert_eq!(unsafe { tmfm_cost_model_preset(TmfmCostPreset::Video, &mut m) }, TmfmStatus::Ok);
    let mut ds = 0.0;
    assert_eq!(unsafe { tmfm_delta_inner_steps(&m, 1.0, &mut ds) }, TmfmStatus::Ok);
    assert_eq!(ds, 40.08);
}

#[test]
fn header_declares_every_export_and_parses_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tmfm.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "tmfm_last_error_message",
        "tmfm_target_unimodal_new",
        "tmfm_target_mixture_new",
        "tmfm_target_free",
        "tmfm_target_dim",
        "tmfm_path_coefficients",
        "tmfm_responsibilities",
        "tmfm_conditional_mean",
        "tmfm_variance_trace",
        "tmfm_gaussian_kl",
        "tmfm_run_sampler",
        "tmfm_cost_model_preset",
        "tmfm_cost",
        "tmfm_delta_inner_steps",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
