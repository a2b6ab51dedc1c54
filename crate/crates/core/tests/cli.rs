use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use ivate::estimator::estimate_tau;
use ivate::links::RhoFamily;
use ivate::sieve::BasisSpec;
use ivate::simulator::{generate, replication_seed, DgpConfig};
use ivate::variance::variance_report;
use ivate::Dataset;

fn ivate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivate"))
        .args(args)
        .env("IVATE_THREADS", "2")
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = ivate(args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn emit(dir: &Path, n: usize, seed: u64) -> String {
    let path = dir.join("data.csv");
    let p = path.to_str().unwrap().to_string();
    let (n, seed) = (n.to_string(), seed.to_string());
    let out = ivate(&[
        "simulate",
        "--n",
        &n,
        "--reps",
        "1",
        "--seed",
        &seed,
        "--k1",
        "2",
        "--k2",
        "2",
        "--emit-data",
        &p,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    p
}

#[test]
fn emitted_data_is_the_first_replication() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit(dir.path(), 300, 9);
    let read = Dataset::read_csv_path(&path).unwrap();
    let cfg = DgpConfig::reference(300, 9);
    let direct = generate(&cfg.with_seed(replication_seed(9, 0))).unwrap();
    assert_eq!(read, direct);
}

#[test]
fn estimate_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit(dir.path(), 400, 3);
    let report = ok_json(&["estimate", "--input", &path, "--k1", "3", "--k2", "2"]);

    let data = Dataset::read_csv_path(&path).unwrap();
    let rho = RhoFamily::EmpiricalLikelihood;
    let est = estimate_tau(&data, BasisSpec::power(3), BasisSpec::power(2), &rho).unwrap();
    let var = variance_report(&data, &est, &rho).unwrap();
    let get = |k: &str| report[k].as_f64().unwrap();
    assert!((get("tau_hat") - est.tau_hat).abs() <= 1e-12);
    assert!((get("se") - var.se).abs() <= 1e-12);
    assert!((get("ci95_lo") - var.ci95.0).abs() <= 1e-12);
    assert!((get("ci95_hi") - var.ci95.1).abs() <= 1e-12);

    for key in [
        "tau_hat",
        "se",
        "ci95_lo",
        "ci95_hi",
        "k1",
        "k2",
        "rho",
        "n",
        "diagnostics",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["k1"], 3);
    assert_eq!(report["k2"], 2);
    assert_eq!(report["rho"], "el");
    assert_eq!(report["n"], 400);
    for key in [
        "min_abs_delta_d",
        "max_weight",
        "solver_iters",
        "saturated",
        "weak_instrument",
    ] {
        assert!(
            report["diagnostics"].get(key).is_some(),
            "missing diagnostics.{key}"
        );
    }
}

#[test]
fn auto_k_estimate_uses_the_tuned_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit(dir.path(), 300, 5);
    let tuned = ok_json(&["tune", "--input", &path]);
    let again = ok_json(&["tune", "--input", &path]);
    assert_eq!(tuned, again);
    let est = ok_json(&["estimate", "--input", &path, "--auto-k"]);
    assert_eq!(est["k1"], tuned["k1_hat"]);
    assert_eq!(est["k2"], tuned["k2_hat"]);
    assert_eq!(tuned["mse1_path"].as_array().unwrap().len(), 5);
    assert_eq!(tuned["mse2_path"].as_array().unwrap().len(), 5);
}

#[test]
fn unit_grid_bounds_select_the_intercept() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit(dir.path(), 200, 2);
    let tuned = ok_json(&["tune", "--input", &path, "--kbar1", "1", "--kbar2", "1"]);
    assert_eq!(tuned["k1_hat"], 1);
    assert_eq!(tuned["k2_hat"], 1);
}

#[test]
fn spline_basis_accepts_every_k() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit(dir.path(), 300, 4);
    for k in ["1", "2", "3", "6"] {
        let r = ok_json(&[
            "estimate", "--input", &path, "--k1", k, "--k2", k, "--basis", "spline",
        ]);
        assert!(r["tau_hat"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn non_binary_treatment_cites_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let mut text = String::from("y,d,z,x1\n");
    for i in 0..30 {
        // data row 16 sits on line 17, after the header
        let d = if i == 15 { "2" } else { "1" };
        text.push_str(&format!(
            "{},{d},{},{}\n",
            i % 2,
            (i / 3) % 2,
            i as f64 / 30.0
        ));
    }
    std::fs::write(&path, text).unwrap();
    let out = ivate(&[
        "estimate",
        "--input",
        path.to_str().unwrap(),
        "--k1",
        "1",
        "--k2",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 17"), "{msg}");
}

#[test]
fn simulate_output_is_reproducible() {
    let args = [
        "simulate", "--reps", "1", "--seed", "7", "--k1", "2", "--k2", "2",
    ];
    let a = ivate(&args);
    let b = ivate(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(!a.stdout.is_empty());
}

#[test]
fn simulate_json_carries_the_oracle_values() {
    let r = ok_json(&[
        "simulate", "--n", "200", "--reps", "4", "--seed", "1", "--k1", "2", "--k2", "2",
        "--format", "json",
    ]);
    assert!((r["tau"].as_f64().unwrap() - 0.15).abs() < 1e-12);
    assert!((r["v_eff"].as_f64().unwrap() - 3.86).abs() < 5e-4);
    let reports = r["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["estimator"], "Naive");
    assert_eq!(reports[1]["estimator"], "cbe");
}

#[test]
fn invalid_rho_exits_with_usage_error() {
    let out = ivate(&[
        "simulate", "--reps", "1", "--k1", "1", "--k2", "1", "--rho", "bogus",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_k_choice_is_a_config_error() {
    let out = ivate(&["simulate", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--auto-k"));
}
