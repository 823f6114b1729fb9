use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn instance(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../instances").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privmkt"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("PRIVMKT_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_accepts_shipped_instances() {
    for name in ["two_owner.json", "iid_single.json", "drift_single.json"] {
        let o = Command::new(env!("CARGO_BIN_EXE_privmkt")).arg("validate").arg(instance(name)).output().unwrap();
        assert_eq!(code(&o), 0, "{name}: {}", stderr(&o));
    }
}

#[test]
fn validate_reports_fosd_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    fs::write(
        &path,
        r#"{"horizon": 1, "epsilon_grid": [0.2, 0.5], "budget_bins": 1, "L": 1.0,
            "owners": [{"label": "x", "grid": [1.0, 2.0], "kernel": {"table": {
              "initial": [0.5, 0.5],
              "transitions": [[[[0.2, 0.8]], [[0.8, 0.2]]]]}}}]}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_privmkt")).arg("validate").arg(&path).output().unwrap();
    assert_eq!(code(&o), 1);
    let text = format!("{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(text.contains("FOSD") || text.contains("fosd"), "{text}");
}

#[test]
fn malformed_input_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{ not json").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_privmkt")).arg("validate").arg(&path).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("parse error"));

    let missing = run(&["synthesize", instance("two_owner.json").to_str().unwrap()], dir.path());
    assert_eq!(code(&missing), 2);

    let neither = run(&["solve", instance("two_owner.json").to_str().unwrap()], dir.path());
    assert_eq!(code(&neither), 2);
}

#[test]
fn synthesize_then_verify_with_rules() {
    let dir = tempfile::tempdir().unwrap();
    let inst = instance("iid_single.json");
    let inst = inst.to_str().unwrap();
    let o = run(&["synthesize", inst, "--sigma", "constant:1"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["rules.json", "design.json", "thresholds.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let rules = dir.path().join("rules.json");
    let v = run(&["verify", inst, "--rules", rules.to_str().unwrap(), "--fail-on-gain", "1e-8"], dir.path());
    assert_eq!(code(&v), 0, "{}", stderr(&v));
    let dev = json(dir.path().join("deviation.json"));
    assert!(dev["max_gain"].as_f64().unwrap() <= 1e-8);
    let manifest = json(dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "verify");
}

#[test]
fn certify_writes_certificate_for_constant_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["certify", instance("iid_single.json").to_str().unwrap(), "--sigma", "constant:0"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("certificate.json").exists());
    assert!(dir.path().join("margins.json").exists());
}

#[test]
fn simulate_replays_identically() {
    let inst = instance("two_owner.json");
    let inst = inst.to_str().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(
            &["simulate", inst, "--sigma", "monotone", "--trials", "200", "--seed", "7", "--keep-traces", "5"],
            d.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["summary.json", "traces.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let traces = fs::read_to_string(a.path().join("traces.csv")).unwrap();
    // 5 traces, two owners, at most two periods
    let rows = traces.lines().count() - 1;
    assert!((10..=20).contains(&rows), "{rows}");
}

#[test]
fn optimize_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["optimize", instance("iid_single.json").to_str().unwrap(), "--starts", "1", "--sweeps", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let res = json(dir.path().join("optimization.json"));
    assert!(res["relaxed_cost"].as_f64().unwrap().is_finite());
    assert!(dir.path().join("optimization_log.csv").exists());
}

#[test]
fn empty_allowed_set_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    let mut v = json(instance("iid_single.json"));
    v["optimizer"]["allowed_eps"] = serde_json::json!([]);
    fs::write(&path, v.to_string()).unwrap();
    let o = run(&["optimize", path.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("infeasible under parametrization"));
}

#[test]
fn oversized_multi_period_search_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["verify", instance("drift_single.json").to_str().unwrap(), "--sigma", "constant:0", "--multi-period"],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
