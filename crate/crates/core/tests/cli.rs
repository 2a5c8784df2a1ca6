use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_narrowgap"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let o = bin().args(args).output().unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stdout).into(), String::from_utf8_lossy(&o.stderr).into())
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("two_discs.json")).unwrap()).unwrap();
    v["grid"] = serde_json::json!({});
    edit(&mut v);
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn sweep_is_deterministic_and_feeds_the_other_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", |_| {});
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (code, stdout, stderr) = run(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "2"]);
        assert_eq!(code, 0, "{stderr}");
        assert!(stdout.contains("Touching limits"));
    }
    let csv_a = std::fs::read(a.join("sweep.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("sweep.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&csv_a).lines().count(), 6);

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let o = &report["outcome"];
    assert_eq!(report["empty"], false);
    assert!((o["kappa_n"].as_f64().unwrap() - std::f64::consts::PI).abs() < 1e-12);
    let limits = &o["aggregates"]["limits"];
    for k in ["q_star", "theta_star", "m1", "m_tilde"] {
        assert!(limits[k]["value"].is_f64() && limits[k]["err"].is_f64(), "{k}");
    }
    assert!(o["aggregates"]["blowup"]["slope"].is_f64());
    assert!(o["records"][0]["prefactor"].as_f64().unwrap() > 0.0);

    let out = a.to_str().unwrap();
    for (cmd, file) in [("energy-fit", "energy_fit.json"), ("limits", "limits.json"), ("reconstruct", "reconstruct.json")] {
        let (code, _, stderr) = run(&[cmd, "--config", &cfg, "--out", out]);
        assert_eq!(code, 0, "{cmd}: {stderr}");
        assert!(a.join(file).exists());
    }
    let (code, _, _) = run(&["report", "--config", &cfg, "--out", out]);
    assert_eq!(code, 0);
    // regenerating the report leaves the records untouched
    assert_eq!(csv_a, std::fs::read(a.join("sweep.csv")).unwrap());
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", |v| v["surprise"] = 1.into());
    assert_eq!(run(&["solve", "--config", &bad]).0, 2);
    let good = write_config(dir.path(), "good.json", |_| {});
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["solve", "--config", &good, "--out", o, "--eps-override", "1e-3,1e-2"]).0, 2);
    assert_eq!(run(&["solve", "--config", &good, "--out", o, "--tolerance", "-1"]).0, 2);
    assert_eq!(run(&["sweep", "--config", "/nonexistent.json"]).0, 2);
    // no stored sweep to read
    assert_eq!(run(&["limits", "--config", &good, "--out", o]).0, 2);
}

#[test]
fn solve_and_fit_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", |_| {});
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    let (code, stdout, _) = run(&["solve", "--config", &cfg, "--out", o, "--eps-override", "1e-2"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("identity residual"));
    assert!(out.join("solve.csv").exists());
    // two points are not enough for the aggregate fits
    assert_eq!(run(&["sweep", "--config", &cfg, "--out", o, "--eps-override", "1e-2,1e-3"]).0, 4);
    // a node budget too small for the gap block fails every solve
    let tiny = write_config(dir.path(), "tiny.json", |v| v["grid"] = serde_json::json!({"max_nodes": 300}));
    let (code, stdout, _) = run(&["sweep", "--config", &tiny, "--out", o]);
    assert_eq!(code, 3);
    assert!(stdout.contains("resolution infeasible") && !stdout.contains("EMPTY"));
}

#[test]
fn empty_sweep_and_three_dimensional_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty.json", |v| v["eps"] = serde_json::json!([]));
    let out = dir.path().join("e");
    let (code, stdout, _) = run(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.contains("EMPTY SWEEP"));

    let cfg3 = configs().join("two_balls_3d.json");
    let out3 = dir.path().join("3d");
    let (code, stdout, stderr) = run(&["report", "--config", cfg3.to_str().unwrap(), "--out", out3.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("3D asymptotic layer"));
    assert!(stdout.contains("closed form"));
    let (code, _, _) = run(&["reconstruct", "--config", cfg3.to_str().unwrap(), "--out", out3.to_str().unwrap()]);
    assert_eq!(code, 0);
}
