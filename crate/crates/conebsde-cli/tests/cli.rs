use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_conebsde"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn conebsde")
}

fn run_in(dir: &Path, cfg: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    all.extend_from_slice(args);
    run(&all)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let p = dir.join("input.json");
    std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn load(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(config(name)).unwrap()).unwrap()
}

#[test]
fn portfolio_writes_summary_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &config("heston-power.json"), &["portfolio", "--steps", "200"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&dir.path().join("summary.json"));
    assert!(summary["y0"].as_f64().unwrap().is_finite());
    let csv = std::fs::read_to_string(dir.path().join("strategy.csv")).unwrap();
    // header plus one row per grid node
    assert_eq!(csv.lines().count(), 1 + 201);
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn zero_market_power_value_is_wealth_power() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &config("zero-market.json"), &["portfolio", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let value = read_json(&dir.path().join("value.json"));
    let row = &value["rows"][0];
    assert_eq!(row[0].as_f64().unwrap(), 1.0);
    // x^gamma / gamma at x = 1 with gamma = 0.5
    assert!((row[1].as_f64().unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn untraded_swap_leg_has_zero_price() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load("bns-exp-swap.json");
    cfg["endowment"]["index"] = 0.into();
    cfg["endowment"]["strike"] = 0.0.into();
    let path = write_config(dir.path(), &cfg);
    let out = run_in(dir.path(), &path, &["price", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let price = read_json(&dir.path().join("price.json"));
    for row in price["rows"].as_array().unwrap() {
        assert!(row[1].as_f64().unwrap().abs() < 1e-12, "{row}");
    }
}

#[test]
fn numeraire_price_plugs_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &config("heston-power-numeraire.json"), &["price"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("price.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let err: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(err.abs() <= 1e-10, "{line}");
    }
}

#[test]
fn degenerate_scalar_case_hits_half() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &config("heston1d-degenerate.json"), &["riccati-solve"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("riccati.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "gamma_11").unwrap();
    let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0].parse::<f64>().unwrap(), 0.0);
    assert!((first[col].parse::<f64>().unwrap() - 0.5).abs() < 1e-9);
}

#[test]
fn blowup_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &config("blowup.json"), &["riccati-solve"]);
    assert_eq!(out.status.code(), Some(3));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["status"], "blow-up");
    let t = summary["explosion_time"].as_f64().unwrap();
    assert!(t > 0.0 && t < 2.0);
}

#[test]
fn validation_reports_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load("heston-power.json");
    cfg["horizon"] = (-1.0).into();
    cfg["utility"]["gamma"] = 1.5.into();
    cfg["model"]["k"] = 0.5.into();
    let path = write_config(dir.path(), &cfg);
    let out = run(&["--config", path.to_str().unwrap(), "portfolio"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("horizon"), "{err}");
    assert!(err.contains("gamma"), "{err}");
    assert!(err.contains("model.k"), "{err}");
}

#[test]
fn unknown_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load("heston-power.json");
    cfg["typo"] = 1.into();
    let path = write_config(dir.path(), &cfg);
    let out = run(&["--config", path.to_str().unwrap(), "portfolio"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_io_error() {
    let out = run(&["--config", "/nonexistent/conebsde.json", "portfolio"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stdout_carries_json_without_out_dir() {
    let out = run(&["--config", config("bns-power.json").to_str().unwrap(), "portfolio"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["strategy_0"].is_array());
}

#[test]
fn transform_verify_passes_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &config("wishart-transform.json"),
        &["verify", "--paths", "4000", "--steps", "100"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["verdict"], "PASS");
}

#[test]
fn drift_match_positional_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &config("heston-exp-swap.json"), &["verify", "drift-match"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn failing_verification_exits_four() {
    // A single Euler step with large volatility biases the Monte Carlo
    // transform far outside its standard error.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load("wishart-transform.json");
    cfg["verify"]["u"] = serde_json::json!([[8.0, 0.0], [0.0, 8.0]]);
    cfg["model"]["sigma"] = serde_json::json!([[1.2, 0.0], [0.0, 1.2]]);
    let path = write_config(dir.path(), &cfg);
    let out = run_in(dir.path(), &path, &["verify", "--paths", "20000", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn verify_is_deterministic_across_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("bns-power.json");
    let args = ["verify", "martingale", "--paths", "2000", "--seed", "7"];
    let mut with_a = args.to_vec();
    with_a.extend(["--threads", "1"]);
    let mut with_b = args.to_vec();
    with_b.extend(["--threads", "4"]);
    assert_eq!(run_in(a.path(), &cfg, &with_a).status.code(), Some(0));
    assert_eq!(run_in(b.path(), &cfg, &with_b).status.code(), Some(0));
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn written_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &config("heston-exp-swap.json"), &["portfolio"]);
    assert_eq!(out.status.code(), Some(0));
    let again = tempfile::tempdir().unwrap();
    let out2 = run_in(again.path(), &dir.path().join("config.json"), &["portfolio"]);
    assert_eq!(out2.status.code(), Some(0));
    assert_eq!(
        std::fs::read(dir.path().join("summary.json")).unwrap(),
        std::fs::read(again.path().join("summary.json")).unwrap()
    );
}

#[test]
fn simulate_path_ids_are_integers() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &config("bns-exp-swap.json"), &["simulate", "--paths", "3", "--steps", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    let second = csv.lines().nth(1).unwrap();
    assert!(second.starts_with("0,"), "{second}");
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
}
