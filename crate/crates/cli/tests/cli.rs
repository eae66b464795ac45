use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_implicit-fit")).args(args).output().expect("binary runs")
}

fn generate(dir: &Path, level: &str, seed: &str) -> Output {
    let out = dir.to_str().unwrap();
    run(&["generate", "--shape", "elliptic-cone", "--count", "3000", "--noise-level", level, "--seed", seed, "--output", out])
}

#[test]
fn generate_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(generate(&a, "0.2", "11").status.success());
    assert!(generate(&b, "0.2", "11").status.success());
    assert!(generate(&c, "0.2", "12").status.success());
    let noisy = |d: &Path| fs::read(d.join("noisy.csv")).unwrap();
    assert_eq!(noisy(&a), noisy(&b));
    assert_ne!(noisy(&a), noisy(&c));
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(a.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 11);
    assert_eq!(meta["shape"], "elliptic-cone");
}

#[test]
fn zero_noise_leaves_points_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate(tmp.path(), "0", "3").status.success());
    assert_eq!(fs::read(tmp.path().join("clean.csv")).unwrap(), fs::read(tmp.path().join("noisy.csv")).unwrap());
}

#[test]
fn unseeded_generate_reports_its_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["generate", "--shape", "unit-circle", "--count", "50", "--output", tmp.path().to_str().unwrap()]);
    assert!(out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let printed: u64 = stderr.trim().strip_prefix("seed: ").unwrap().parse().unwrap();
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"].as_u64(), Some(printed));
}

#[test]
fn build_plan_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    for p in [&a, &b] {
        assert!(run(&["build-plan", "--basis", "poly-trig:2:2:1.5", "--output", p.to_str().unwrap()]).status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn oversized_basis_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["build-plan", "--basis", "monomial:3:40", "--output", tmp.path().join("p.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_fails_before_work() {
    let out = run(&["fit", "--input", "/nonexistent/cloud.csv", "--basis", "monomial:2:2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn fit_then_eval_recovers_the_cone() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate(tmp.path(), "0.1", "5").status.success());
    let path = |name: &str| tmp.path().join(name).to_str().unwrap().to_owned();
    let fit = run(&[
        "fit", "--input", &path("noisy.csv"), "--basis", "monomial:3:2", "--noise-level", "0.1",
        "--output", &path("fit.json"), "--level-set", &path("fit.obj"), "--resolution", "24",
    ]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    assert!(fs::read_to_string(path("fit.obj")).unwrap().contains("\nf "));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(path("fit.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["basis"]["n"], 3);

    let eval = run(&["eval", "--input", &path("clean.csv"), "--fit", &path("fit.json"), "--a-star", "elliptic-cone", "--resolution", "24"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(eval["cosine_similarity"].as_f64().unwrap() > 0.99);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate(tmp.path(), "0", "9").status.success());
    let path = |name: &str| tmp.path().join(name).to_str().unwrap().to_owned();
    fs::write(path("cfg.json"), r#"{"basis": {"kind": "monomial", "n": 3, "gamma": 2}, "noise": {"theta": 0.3}}"#).unwrap();
    let out = run(&["fit", "--input", &path("clean.csv"), "--config", &path("cfg.json"), "--theta", "0", "--output", &path("fit.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(path("fit.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["theta_used"], 0.0);
}

#[test]
fn grid_search_writes_the_curve() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate(tmp.path(), "0.2", "13").status.success());
    let path = |name: &str| tmp.path().join(name).to_str().unwrap().to_owned();
    let out = run(&[
        "--threads", "2", "grid-search", "--input", &path("noisy.csv"), "--basis", "monomial:3:2",
        "--grid", "0:0.3:0.05", "--no-normalize", "--output", &path("gs.json"), "--curve", &path("curve.csv"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = fs::read_to_string(path("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("theta,sigma_min,lambda_min,admissible"));
    assert_eq!(curve.lines().count(), 8);
}
