use std::path::Path;
use std::process::{Command, Output};

fn staterate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_staterate")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn scenario_json(output: &Path, esnr_min: f64) -> String {
    format!(
        r#"{{
  "environment": "pool",
  "trajectory": {{ "kind": "constant_velocity", "start_distance": 5.0, "speed": 5.0, "height": 20.0, "duration": 1.0 }},
  "duration": 1.0,
  "adapters": [{{ "kind": "opt" }}, {{ "kind": "esnr" }}, {{ "kind": "samplerate" }}],
  "output_path": {:?},
  "checks": [{{ "adapter": "esnr", "metric": "throughput_vs_opt", "min": {esnr_min} }}]
}}"#,
        output.to_str().unwrap()
    )
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", "{ not json");
    assert_eq!(staterate(&["evaluate", &bad]).status.code(), Some(2));

    let unknown = write(dir.path(), "unknown.json", r#"{"inputs": [], "colour": 1}"#);
    assert_eq!(staterate(&["compare", &unknown]).status.code(), Some(2));

    let empty = write(dir.path(), "empty.json", r#"{"inputs": []}"#);
    assert_eq!(staterate(&["compare", &empty]).status.code(), Some(2));

    let missing = dir.path().join("absent.json");
    assert_eq!(staterate(&["train", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn simulate_requires_out_and_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.json",
        r#"{
  "environment": "square",
  "trajectories": [{ "kind": "hover", "anchor_distance": 10.0, "height": 10.0, "duration": 0.5 }]
}"#,
    );
    assert_eq!(staterate(&["simulate", &cfg]).status.code(), Some(2));

    let out = dir.path().join("traces");
    let run = staterate(&["simulate", &cfg, "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(std::fs::read_dir(&out).unwrap().count() > 0);
}

#[test]
fn evaluate_then_compare_with_checks() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let cfg = write(dir.path(), "scn.json", &scenario_json(&a, 0.0));

    let run = staterate(&["evaluate", &cfg, "--check"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let run = staterate(&["evaluate", &cfg, "--seed", "9", "--out", b.to_str().unwrap()]);
    assert!(run.status.success());
    assert!(a.exists() && b.exists());

    let merged = dir.path().join("merged.csv");
    let cmp = write(
        dir.path(),
        "cmp.json",
        &format!(
            r#"{{"inputs": [{:?}, {:?}], "checks": [{{"adapter": "opt", "metric": "throughput_vs_opt", "min": 1.0}}]}}"#,
            a.to_str().unwrap(),
            b.to_str().unwrap()
        ),
    );
    let run = staterate(&["compare", &cmp, "--out", merged.to_str().unwrap(), "--check"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(&merged).unwrap();
    assert!(text.starts_with("schema_version,adapter,metric,bin,value"));
    assert!(text.contains(",esnr,throughput,all,"));
}

#[test]
fn unmet_threshold_exits_3_only_with_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "scn.json", &scenario_json(&dir.path().join("r.csv"), 2.0));
    assert_eq!(staterate(&["evaluate", &cfg]).status.code(), Some(0));
    let run = staterate(&["evaluate", &cfg, "--check"]);
    assert_eq!(run.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&run.stderr).contains("esnr/throughput_vs_opt/all"));
}
