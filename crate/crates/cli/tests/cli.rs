use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SYSTEM: &str = r#"{
    "A": [[1.0, 0.1], [0.0, 0.9]],
    "B": [[1.0, 0.0], [0.0, 1.0]],
    "C": [[1.0, 0.0], [0.0, 1.0]],
    "Hw": [[0.01, 0.0], [0.0, 0.01]],
    "Hv": [[0.01, 0.0], [0.0, 0.01]],
    "x0_mean": [1.0, 2.0],
    "x0_cov": [[0.1, 0.0], [0.0, 0.1]],
    "problem": {"horizon": 3, "Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[0.1, 0.0], [0.0, 0.1]],
                "reference": [0.5, 0.5],
                "constraints": {"Gx": [[0.0, 0.0], [0.0, 0.0]], "Gu": [[1.0, 0.0], [0.0, 1.0]], "g": [2.0, 2.0]},
                "jd_max": 0.5}
}"#;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asentinel"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn workspace() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let system = dir.path().join("system.json");
    fs::write(&system, SYSTEM).unwrap();
    let path = system.to_str().unwrap().to_string();
    (dir, path)
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn simulate_is_reproducible() {
    let (dir, system) = workspace();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["simulate", "--system", &system, "--seeds", "0..3", "--mode", "2"], out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(a.join("rollouts.csv")).unwrap();
    assert_eq!(text, fs::read_to_string(b.join("rollouts.csv")).unwrap());
    assert_eq!(header(&a.join("rollouts.csv")), "seed,k,mode,x_0,x_1,y_0,y_1,u_0,u_1");
    assert_eq!(text.lines().count(), 1 + 3 * 4);
}

#[test]
fn optimize_writes_solution_and_trace() {
    let (dir, system) = workspace();
    let o = run(&["optimize", "--system", &system, "--formulation", "detection-constrained", "--jd-max", "0.6"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sol: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("solution.json")).unwrap()).unwrap();
    assert_eq!(sol["status"], "Optimal");
    assert_eq!(sol["jd_max"], 0.6);
    assert!(sol["jd"].as_f64().unwrap() <= 0.6 + 1e-6);
    assert_eq!(sol["u_star"].as_array().unwrap().len(), 6);
    assert_eq!(
        header(&dir.path().join("trace.csv")),
        "restart,iteration,objective,side_value,violation,multiplier,penalty"
    );
}

#[test]
fn optimize_fails_on_infeasible_problem() {
    let (dir, _) = workspace();
    let bad = SYSTEM.replace(r#""g": [2.0, 2.0]"#, r#""g": [-1.0, 2.0]"#).replace(r#""Gu": [[1.0, 0.0]"#, r#""Gu": [[0.0, 0.0]"#);
    let path = dir.path().join("bad.json");
    fs::write(&path, bad).unwrap();
    let o = run(&["optimize", "--system", path.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Infeasible"));
}

#[test]
fn parse_errors_report_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    fs::write(&path, "{\"A\": [[1.0]],\n  \"B\": [[1.0]] \"C\": 3}").unwrap();
    let o = run(&["simulate", "--system", path.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2 column"), "{err}");
}

#[test]
fn detect_writes_telemetry() {
    let (dir, system) = workspace();
    let o = run(&["detect", "--system", &system, "--seeds", "4", "--mode", "1", "--horizon", "5"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = dir.path().join("detect_seed4.csv");
    assert_eq!(header(&path), "k,detector_id,mode_0,mode_1,mode_2,mode_3,decision");
    // 5 steps × 5 detectors
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1 + 25);
}

#[test]
fn closed_loop_pure_control_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["closed-loop", "--formulation", "pure-control", "--seeds", "0,1"], out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["steps.csv", "windows.csv", "latencies.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(header(&a.join("steps.csv")).starts_with("formulation,seed,k,minute,window,true_mode"));
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("pure-control,2,1.0,1.0,0,"), "{summary}");
}

#[test]
fn thread_variable_is_validated() {
    let (dir, system) = workspace();
    let o = Command::new(env!("CARGO_BIN_EXE_asentinel"))
        .args(["simulate", "--system", &system, "--output-dir"])
        .arg(dir.path())
        .env("ASENTINEL_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("ASENTINEL_THREADS"));
}
