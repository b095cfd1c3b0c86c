use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use subpop_core::cvar::CvarCurve;
use subpop_core::data::make_folds;

fn subpop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subpop")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn result(args: &[&str]) -> Value {
    json(&subpop(args))["result"].clone()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn constant_csv(dir: &Path, c: f64, n: usize) -> String {
    let body: String =
        std::iter::once("loss,z0\n".to_string()).chain((0..n).map(|i| format!("{c},{}\n", i % 7))).collect();
    write(dir, "constant.csv", &body)
}

fn simulated_csv(dir: &Path, n: usize) -> String {
    let path = dir.join("sim.csv");
    let p = path.to_str().unwrap();
    json(&subpop(&["simulate", "--n", &n.to_string(), "--seed", "0", "--output", p]));
    p.to_string()
}

fn assert_validation_failure(out: &Output) {
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn cvar_examples() {
    let r = result(&["cvar", "--values", "4,3,2,1", "--alpha", "0.5"]);
    assert_eq!(f(&r["value"]), 3.5);
    let r = result(&["cvar", "--values", "4,3,2,1", "--alpha", "1"]);
    assert_eq!(f(&r["value"]), 2.5);
    assert_validation_failure(&subpop(&["cvar", "--values", "4,3,2,1", "--alpha", "0"]));
}

#[test]
fn mixture_of_levels() {
    let r = result(&["mixture", "--values", "4,3,2,1", "--atoms", "0.25:0.5,0.5:0.5"]);
    assert_eq!(f(&r["value"]), 3.75);
    assert_validation_failure(&subpop(&["mixture", "--values", "4,3,2,1", "--atoms", "0.25:0.5,0.5:0.4"]));
}

#[test]
fn cvar_reads_loss_column_and_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.csv", "loss,z0\n4,0\n3,0\n2,1\n1,1\n");
    let out = json(&subpop(&["cvar", "--input", &good, "--alpha", "0.5"]));
    assert_eq!(f(&out["result"]["value"]), 3.5);
    assert_eq!(out["manifest"]["input_digest"].as_str().unwrap().len(), 16);

    let bad = write(dir.path(), "bad.csv", "loss,z0\n4,0\nfour,0\n");
    let out = subpop(&["cvar", "--input", &bad, "--alpha", "0.5"]);
    assert_validation_failure(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));

    let missing = dir.path().join("missing.csv");
    let out = subpop(&["cvar", "--input", missing.to_str().unwrap(), "--alpha", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn estimate_constant_losses() {
    let dir = tempfile::tempdir().unwrap();
    let csv = constant_csv(dir.path(), 2.5, 60);
    for learner in ["knn", "boosted_stumps"] {
        let r = result(&["estimate", "--input", &csv, "--learner", learner, "--alpha", "0.2"]);
        assert_eq!(f(&r["omega"]), 2.5);
        assert_eq!(f(&r["sigma"]), 0.0);
    }
}

#[test]
fn external_learner_needs_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let csv = constant_csv(dir.path(), 1.0, 20);
    assert_validation_failure(&subpop(&["estimate", "--input", &csv, "--learner", "external"]));
    assert_validation_failure(&subpop(&["estimate", "--input", &csv, "--folds", "1"]));
}

fn curve_rows(out: &Output) -> Vec<Vec<f64>> {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("alpha,omega,sigma,ci_low,ci_high,plugin"));
    lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect()
}

#[test]
fn curve_matches_estimate_per_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulated_csv(dir.path(), 1500);
    let common = ["--input", csv.as_str(), "--folds", "3", "--rounds", "40"];
    let out = subpop(&[&["curve", "--alphas", "1,0.5,0.25,0.1"][..], &common].concat());
    let manifest: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(manifest["command"], "curve");
    let rows = curve_rows(&out);
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let alpha = row[0].to_string();
        let e = result(&[&["estimate", "--alpha", alpha.as_str()][..], &common].concat());
        for (i, key) in ["omega", "sigma", "ci_low", "ci_high"].iter().enumerate() {
            assert_eq!(row[i + 1].to_bits(), f(&e[key]).to_bits(), "{key} at alpha {alpha}");
        }
    }
    let mean = f(&result(&[&["estimate", "--alpha", "1"][..], &common].concat())["omega"]);
    assert_eq!(rows[0][1], mean);
    // plug-in column rises as alpha falls
    assert!(rows.windows(2).all(|w| w[1][5] >= w[0][5]));
}

fn staircase_csv(dir: &Path) -> String {
    let body: String =
        std::iter::once("loss,z0,mu_hat\n".to_string()).chain((1..=100).map(|i| format!("{i},{i},{i}\n"))).collect();
    write(dir, "stairs.csv", &body)
}

/// Smallest alpha on a 1e-4 grid whose tail average is at or below `threshold`.
fn scan(values: &[f64], threshold: f64, alpha_lo: f64) -> Option<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let tail = |alpha: f64| {
        let mut mass = alpha * n;
        let mut acc = 0.0;
        for v in &sorted {
            let w = mass.min(1.0);
            if w <= 0.0 {
                break;
            }
            acc += w * v;
            mass -= w;
        }
        acc / (alpha * n)
    };
    let steps = ((1.0 - alpha_lo) / 1e-4).ceil() as usize;
    (0..=steps).map(|i| (alpha_lo + i as f64 * 1e-4).min(1.0)).find(|&a| tail(a) <= threshold)
}

#[test]
fn certify_boundary_infeasible_and_staircase() {
    let dir = tempfile::tempdir().unwrap();
    let csv = constant_csv(dir.path(), 2.0, 50);
    let r = result(&["certify", "--input", &csv, "--threshold", "3", "--alpha-lo", "0.05"]);
    assert_eq!(f(&r["alpha_hat"]), 0.05);
    assert_eq!(r["boundary"], true);
    let r = result(&["certify", "--input", &csv, "--threshold", "1"]);
    assert_eq!(r["alpha_hat"], "infeasible");

    let stairs = staircase_csv(dir.path());
    let values: Vec<f64> = (1..=100).map(f64::from).collect();
    let threshold = (76..=100).map(f64::from).sum::<f64>() / 25.0;
    let t = threshold.to_string();
    let r = result(&[
        "certify",
        "--input",
        &stairs,
        "--learner",
        "external",
        "--folds",
        "2",
        "--threshold",
        &t,
        "--alpha-lo",
        "0.02",
        "--u-delta",
        "0.1",
    ]);
    let partition = make_folds(100, 2, 0).unwrap();
    let per_fold: Vec<f64> = (0..2)
        .map(|k| {
            let fold: Vec<f64> = partition.fold(k).iter().map(|&i| values[i]).collect();
            scan(&fold, threshold, 0.02).unwrap()
        })
        .collect();
    let expected = per_fold.iter().sum::<f64>() / 2.0;
    assert!((f(&r["alpha_hat"]) - expected).abs() <= 1e-3, "{} vs {expected}", r["alpha_hat"]);
    assert_eq!(r["error_bounds"].as_array().unwrap().len(), 2);

    let whole = CvarCurve::new(&values).unwrap();
    assert!((scan(&values, threshold, 0.02).unwrap() - 0.25).abs() <= 1e-3);
    assert!(whole.value(0.25) <= threshold);
}

#[test]
fn simulate_oracle_hocvar_and_ucb() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulated_csv(dir.path(), 400);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 401);

    let r = result(&["oracle", "--outer", "300", "--inner", "50", "--seed", "0"]);
    assert!(f(&r["value"]) > 0.0 && f(&r["stderr"]) > 0.0);

    let r = result(&["hocvar", "--values", "1.5,1.5,1.5", "--k", "3", "--alpha", "0.2"]);
    assert_eq!(f(&r["value"]), 1.5);

    let body: String = std::iter::once("loss,z0,mu_hat\n".to_string())
        .chain((0..60).map(|i| {
            let l = (i % 9) as f64 / 2.0;
            format!("{l},{i},{l}\n")
        }))
        .collect();
    let perfect = write(dir.path(), "perfect.csv", &body);
    let r = result(&["ucb", "--input", &perfect, "--learner", "external", "--folds", "3"]);
    for fold in r.as_array().unwrap() {
        assert_eq!(f(&fold["excess_mse_term"]), 0.0);
        assert!(f(&fold["ucb"]) >= f(&fold["omega_k"]));
    }
    assert_validation_failure(&subpop(&["ucb", "--input", &perfect, "--learner", "external", "--m", "1"]));
}

fn without_clock(out: &Output) -> Value {
    let mut v = json(out);
    v["manifest"].as_object_mut().unwrap().remove("wall_clock_seconds");
    v
}

#[test]
fn reruns_are_identical_apart_from_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulated_csv(dir.path(), 600);
    let args = ["estimate", "--input", csv.as_str(), "--rounds", "20", "--seed", "4"];
    let a = subpop(&args);
    let b = subpop(&args);
    assert_eq!(without_clock(&a), without_clock(&b));
    let strip = |o: &Output| {
        let s = String::from_utf8(o.stdout.clone()).unwrap();
        let start = s.find("\"wall_clock_seconds\":").unwrap();
        let end = start + s[start..].find('}').unwrap();
        format!("{}{}", &s[..start], &s[end..])
    };
    assert_eq!(strip(&a), strip(&b));

    let single = Command::new(env!("CARGO_BIN_EXE_subpop")).args(args).env("SUBPOP_THREADS", "1").output().unwrap();
    assert_eq!(without_clock(&a), without_clock(&single));
    let bad = Command::new(env!("CARGO_BIN_EXE_subpop")).args(args).env("SUBPOP_THREADS", "0").output().unwrap();
    assert_validation_failure(&bad);
}

#[test]
fn version_and_usage() {
    let out = subpop(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
    assert_eq!(subpop(&["cvar", "--alpha", "0.5"]).status.code(), Some(2));
    assert_eq!(subpop(&["nonsense"]).status.code(), Some(2));
}
