use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tmfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmfm")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMALL_UNIMODAL: &str = r#"{
  "kind": "unimodal_kl",
  "seed": 4,
  "samples": 2000,
  "targets": [{ "name": "u", "target": { "unimodal": { "mu": [1.0, -0.5], "sigma": 1.0 } } }],
  "samplers": [
    { "method": "fm", "n": [2, 4] },
    { "method": "tm_euler", "n": [1], "s": [2, 4] }
  ]
}"#;

#[test]
fn reruns_are_byte_identical_and_manifest_is_complete() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "u.json", SMALL_UNIMODAL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let o = tmfm(&[
            "unimodal-kl",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv_a = std::fs::read(a.join("unimodal_kl_u.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("unimodal_kl_u.csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "method,N,S,modeled_cost,kl_closed_form,kl_mc,mc_se");
    assert_eq!(text.lines().count(), 5);

    let m = manifest(&a);
    assert_eq!(m["complete"], true);
    assert_eq!(m["kind"], "unimodal_kl");
    let arts = m["artifacts"].as_array().unwrap();
    assert!(arts.iter().all(|x| x["complete"] == true));
    let csv = arts.iter().find(|x| x["path"] == "unimodal_kl_u.csv").unwrap();
    let cols: Vec<&str> = csv["columns"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(cols, ["method", "N", "S", "modeled_cost", "kl_closed_form", "kl_mc", "mc_se"]);
    assert!(csv["columns"].as_array().unwrap().iter().all(|c| c["source"].is_string()));
}

#[test]
fn seed_flag_changes_monte_carlo_columns_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "u.json", SMALL_UNIMODAL);
    let read = |seed: &str| {
        let out = tmp.path().join(seed);
        let o =
            tmfm(&["unimodal-kl", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success());
        let mut r = csv::Reader::from_path(out.join("unimodal_kl_u.csv")).unwrap();
        r.records().map(|x| x.unwrap()).collect::<Vec<_>>()
    };
    let (x, y) = (read("5"), read("6"));
    for (a, b) in x.iter().zip(&y) {
        assert_eq!(a.get(4), b.get(4));
        assert_ne!(a.get(5), b.get(5));
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let cfg = write_config(tmp.path(), "u.json", SMALL_UNIMODAL);
    let bad_field = write_config(tmp.path(), "b.json", r#"{ "kind": "cost_model", "sampler": [] }"#);
    let bad_value =
        write_config(tmp.path(), "v.json", r#"{ "kind": "cost_model", "samplers": [{ "method": "fm", "n": [0] }] }"#);
    for args in [
        vec!["mixture-kl", "--config", cfg.to_str().unwrap(), "--out", out],
        vec!["cost-model", "--config", bad_field.to_str().unwrap(), "--out", out],
        vec!["cost-model", "--config", bad_value.to_str().unwrap(), "--out", out],
        vec!["cost-model", "--config", tmp.path().join("missing.json").to_str().unwrap(), "--out", out],
        vec!["unimodal-kl", "--config", cfg.to_str().unwrap()],
    ] {
        let o = tmfm(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn runtime_failure_leaves_incomplete_manifest() {
    let tmp = TempDir::new().unwrap();
    // the second target has E[V | x] = 0 at t = 0.5, so its cosine reference is undefined
    let cfg = write_config(
        tmp.path(),
        "p.json",
        r#"{
  "kind": "posterior_hist",
  "samples": 500,
  "times": [0.5],
  "bins": 10,
  "targets": [
    { "name": "ok", "target": { "unimodal": { "mu": [1.0, 0.0], "sigma": 1.0 } } },
    { "name": "bad", "target": { "unimodal": { "mu": [0.0, 0.0], "sigma": 1.0 } } }
  ]
}"#,
    );
    let out = tmp.path().join("out");
    let o = tmfm(&["posterior-hist", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["complete"], false);
    assert!(m["error"].as_str().unwrap().contains("zero"));
    let arts = m["artifacts"].as_array().unwrap();
    let ok = arts.iter().find(|a| a["path"] == "posterior_hist_ok.csv").unwrap();
    assert_eq!(ok["complete"], true);
    assert!(out.join("posterior_hist_ok.csv").exists());
    assert!(arts.iter().all(|a| a["path"] != "posterior_hist_bad.csv" || a["complete"] == false));
}

#[test]
fn cost_model_table_is_exact() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cost_model.json");
    let o = tmfm(&["cost-model", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("cost_model.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["method", "N", "S", "modeled_cost", "delta_inner_steps"]
    );
    let row = r
        .records()
        .map(|x| x.unwrap())
        .find(|x| x.get(0) == Some("tm_euler") && x.get(1) == Some("16") && x.get(2) == Some("8"))
        .unwrap();
    let cost: f64 = row.get(3).unwrap().parse().unwrap();
    assert_eq!(cost, 16.0 * 0.01120 + 128.0 * 0.00238);
    assert!(out.join("cost_model.svg").exists());
}
