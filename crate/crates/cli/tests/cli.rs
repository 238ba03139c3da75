use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatial-memory"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_then_preprocess_and_construct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["--seed", "4", "simulate"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scene.json", "trajectory.jsonl", "episode_log.json"] {
        assert!(d.join(f).exists(), "{f}");
    }

    let traj = d.join("trajectory.jsonl");
    let traj = traj.to_str().unwrap();
    let a = d.join("a.json");
    let b = d.join("b.json");
    assert_eq!(code(&run(d, &["preprocess", "--input", traj, "--out", a.to_str().unwrap(), "--validate"])), 0);
    assert_eq!(code(&run(d, &["preprocess", "--input", traj, "--out", b.to_str().unwrap()])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let report = json(&d.join("quality_report.json"));
    assert_eq!(report["passed"], true);
    let records = json(&a);
    assert_eq!(records["interval"], 20);
    assert!(records["sparse"]["0"].is_array());

    let mem = d.join("memory.json");
    assert_eq!(code(&run(d, &["construct", "--input", traj, "--out", mem.to_str().unwrap()])), 0);
    assert!(!json(&mem)["tokens"].as_array().unwrap().is_empty());
}

#[test]
fn failing_quality_report_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["--seed", "1", "simulate"])), 0);
    let traj = d.join("trajectory.jsonl");
    let mut text = std::fs::read_to_string(&traj).unwrap();
    text.push_str("{\"type\":\"event\",\"t\":0.5,\"kind\":\"gripper\",\"payload\":{\"value\":1005.0}}\n");
    std::fs::write(&traj, text).unwrap();
    let out = run(
        d,
        &["preprocess", "--input", traj.to_str().unwrap(), "--out", d.join("r.json").to_str().unwrap(), "--validate"],
    );
    assert_eq!(code(&out), 2);
    assert_eq!(json(&d.join("quality_report.json"))["passed"], false);
}

#[test]
fn episode_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["--seed", "2", "episode", "--mode", "full"])), 0);
    for f in ["episode_log.json", "metrics.json", "memory.json", "refine_audit.jsonl"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let first = std::fs::read(d.join("episode_log.json")).unwrap();
    assert_eq!(code(&run(d, &["--seed", "2", "episode", "--mode", "full"])), 0);
    assert_eq!(std::fs::read(d.join("episode_log.json")).unwrap(), first);

    let none = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(none.path(), &["--seed", "2", "episode", "--mode", "none"])), 0);
    assert!(!none.path().join("memory.json").exists());
}

#[test]
fn suite_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["suite", "--episodes", "3", "--modes", "full,none"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("suite.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("Model,First-Fixation Time (s),Head Search Path Length (deg)"));
    assert!(lines[1].starts_with("full,") && lines[2].starts_with("none,"));
    assert_eq!(json(&d.join("suite_report.json"))["n_episodes"], 3);
    assert!(d.join("logs/full/episode_000000.json").exists());

    let report = d.join("metrics_report.json");
    let logs = d.join("logs");
    let out = run(d, &["metrics", "--logs", logs.to_str().unwrap(), "--out", report.to_str().unwrap(), "--csv"]);
    assert_eq!(code(&out), 0);
    let r = json(&report);
    assert_eq!(r["episodes"].as_array().unwrap().len(), 6);
    assert_eq!(r["groups"].as_array().unwrap().len(), 2);
    assert!(d.join("metrics_report.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["episode", "--mode", "sideways"])), 2);
    assert_eq!(code(&run(d, &["no-such-command"])), 2);
    let bad = d.join("bad.json");
    std::fs::write(&bad, "{\"max_steps\": 0}").unwrap();
    assert_eq!(code(&run(d, &["--config", bad.to_str().unwrap(), "episode"])), 2);
    let missing = d.join("missing.jsonl");
    assert_eq!(code(&run(d, &["preprocess", "--input", missing.to_str().unwrap(), "--out", "x.json"])), 1);
}
