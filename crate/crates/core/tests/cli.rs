use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sybilkad::experiments::Scenario;
use sybilkad::{build_network, NetworkConfig};

fn sybilkad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sybilkad")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_scenarios_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        Scenario::from_json_file(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "network": { "n_honest": 0 } }"#).unwrap();
    let out = dir.path().join("rows.csv");
    assert_eq!(sybilkad(&["run", path(&bad), "--out", path(&out)]).status.code(), Some(2));

    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(sybilkad(&["run", path(&bad), "--out", path(&out)]).status.code(), Some(2));

    fs::write(&bad, r#"{ "unknown_field": 1 }"#).unwrap();
    assert_eq!(sybilkad(&["run", path(&bad), "--out", path(&out)]).status.code(), Some(2));

    let missing = dir.path().join("absent.json");
    assert_eq!(sybilkad(&["run", path(&missing), "--out", path(&out)]).status.code(), Some(2));

    fs::write(&bad, "{}").unwrap();
    let r = sybilkad(&["run", path(&bad), "--out", path(&out), "--seed-range", "5..5"]);
    assert_eq!(r.status.code(), Some(2));

    let r = sybilkad(&["plan", "--target", "xyz"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.json");
    fs::write(
        &scenario,
        r#"{ "name": "tiny", "network": { "n_honest": 150 }, "attack": { "mode": "active" },
             "probes": { "max_probes": 3 }, "targets": 2 }"#,
    )
    .unwrap();
    let rows = dir.path().join("rows.csv");
    let plans = dir.path().join("plans.csv");
    let r = sybilkad(&["run", path(&scenario), "--out", path(&rows), "--plans", path(&plans), "--seed-range", "1..=2"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(&rows).unwrap();
    // Header plus 2 seeds x 2 targets x 3 probes.
    assert_eq!(csv.lines().count(), 1 + 12);
    assert_eq!(fs::read_to_string(&plans).unwrap().lines().count(), 1 + 4);

    let again = dir.path().join("rows2.csv");
    sybilkad(&["run", path(&scenario), "--out", path(&again), "--seed-range", "1..=2"]);
    assert_eq!(csv, fs::read_to_string(&again).unwrap());

    let tables = dir.path().join("tables");
    let r = sybilkad(&["report", path(&rows), "--out", path(&tables)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("tiny\t"));
    for f in ["success.csv", "eclipse_over_time.csv", "termination.csv"] {
        assert!(tables.join(f).exists(), "{f}");
    }
}

#[test]
fn detect_reads_a_closest_set() {
    let mut net = build_network(NetworkConfig::with_size(500, 3)).unwrap();
    let target = net.random_target();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("closest.csv");
    let mut body = String::from("id\n");
    for i in net.true_closest(&target, 20, |_| true) {
        body.push_str(&format!("{}\n", net.id(i)));
    }
    fs::write(&file, body).unwrap();
    let r = sybilkad(&["detect", "--closest", path(&file), "--n", "500", "--target", &target.to_string()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert!(v["d_kl"].as_f64().unwrap() >= 0.0);

    fs::write(&file, "peer\nabc\n").unwrap();
    let r = sybilkad(&["detect", "--closest", path(&file), "--n", "500", "--target", &target.to_string()]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn plan_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("net.json");
    fs::write(&cfg, r#"{ "n_honest": 300, "seed": 4 }"#).unwrap();
    let target = "00".repeat(32);
    let r = sybilkad(&["plan", "--target", &target, "--net", path(&cfg), "--n-hat", "300"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert!(v["forged_ids"].is_array());
}
