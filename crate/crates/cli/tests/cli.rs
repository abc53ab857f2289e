use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn edgeloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeloop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn semantic_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = edgeloop(&["run", "--scenario", "semantic", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("scenario=semantic warmup=50 horizon=300"), "{table}");
    assert!(table.contains("oracle") && table.contains("+0.00%"));

    let r = report(dir.path());
    assert_eq!(r["policies"].as_object().unwrap().len(), 4);
    assert_eq!(r["warmup_prefix"], 50);
    for p in ["e3", "fixed_heuristic", "round_robin", "oracle"] {
        let csv = fs::read_to_string(dir.path().join(format!("trajectory_{p}.csv"))).unwrap();
        assert!(csv.starts_with("task_index,latency_ms,ma20_ms\n"));
        assert!(csv.lines().nth(1).unwrap().starts_with("50,"));
    }
    let events = fs::read_to_string(dir.path().join("events.log")).unwrap();
    assert_eq!(events.lines().count(), 10);
    let audit = fs::read_to_string(dir.path().join("audit.log")).unwrap();
    for line in audit.lines() {
        let entry: Value = serde_json::from_str(line).unwrap();
        assert!(entry["tool"].is_string());
    }
    assert!(!dir.path().join("decisions.log").exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.json");
    fs::write(
        &config,
        r#"{"scenario":"drift","horizon":60,"policies":["e3","fixed_heuristic"]}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = edgeloop(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--horizon",
        "80",
        "--policies",
        "e3,oracle",
        "--trace-decisions",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out_dir);
    assert_eq!(r["scenario"], "drift");
    assert_eq!(r["horizon"], 80);
    let names: Vec<_> = r["policies"].as_object().unwrap().keys().cloned().collect();
    assert_eq!(names, ["e3", "oracle"]);
    let decisions = fs::read_to_string(out_dir.join("decisions.log")).unwrap();
    assert_eq!(decisions.lines().count(), 80);
}

#[test]
fn bad_input_exits_nonzero_with_a_message() {
    let out = edgeloop(&["run", "--policies", "e3,greedy"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown policy `greedy`"), "{err}");
    assert!(err.contains("fixed_heuristic"), "{err}");

    let out = edgeloop(&["run", "--scenario", "storm"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));

    let out = edgeloop(&["run", "--profiles", "/nonexistent/pool.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = edgeloop(&["run", "--warmup", "100", "--horizon", "50"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds horizon"));
}

#[test]
fn unreachable_adapter_falls_back_to_scripted_policy() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let dir = tempfile::tempdir().unwrap();
    let url = format!("http://127.0.0.1:{port}/v1/chat/completions");
    let out = edgeloop(&[
        "run",
        "--scenario",
        "warmup",
        "--warmup",
        "30",
        "--horizon",
        "40",
        "--policies",
        "e3,oracle",
        "--adapter-url",
        &url,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let audit = fs::read_to_string(dir.path().join("audit.log")).unwrap();
    let entries: Vec<Value> = audit.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(entries.iter().any(|e| e["outcome"] == "fallback"));
    assert!(entries
        .iter()
        .any(|e| e["tool"] == "switch_router" && e["outcome"] == "ok"));
}
