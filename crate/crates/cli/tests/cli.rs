use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn kvtune() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kvtune"));
    c.env_remove("KVTUNE_API_KEY").env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    kvtune().args(args).output().expect("spawn kvtune")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A mixed trace from a fixed linear congruential sequence.
fn write_trace(path: &Path, n: u64) {
    let mut x: u64 = 0x2545_f491_4f6c_dd1d;
    let mut out = String::from("timestamp_us,op,key,value_size,column_family\n");
    for i in 0..n {
        x = x.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        let key = (x >> 33) % 5000;
        let (op, size) = match (x >> 20) % 10 {
            0..=6 => ("GET", 0),
            7 | 8 => ("PUT", 100 + (x >> 40) % 300),
            _ => ("DELETE", 0),
        };
        out.push_str(&format!("{},{op},{:016x},{size},default\n", i * 50, key));
    }
    fs::write(path, out).unwrap();
}

fn journal_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn characterize_then_synthesize() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("trace.csv");
    write_trace(&trace, 20_000);
    let ch = dir.path().join("ch.json");
    let out = run(&["characterize", s(&trace), "-o", s(&ch), "--window-s", "0.1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(&ch).unwrap()).unwrap();
    assert!(v.is_object());

    let spec = dir.path().join("spec.json");
    let out = run(&["synthesize", s(&ch), "-o", s(&spec)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let spec: Value = serde_json::from_str(&fs::read_to_string(&spec).unwrap()).unwrap();
    assert_eq!(spec["name"], "spec");
    assert!(!spec["phases"].as_array().unwrap().is_empty());
}

#[test]
fn characterize_missing_trace_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["characterize", "/nonexistent/trace.csv", "-o", s(&dir.path().join("o.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/trace.csv"));
}

#[test]
fn synthesize_rejects_garbage() {
    let dir = TempDir::new().unwrap();
    let ch = dir.path().join("ch.json");
    fs::write(&ch, "{\"not\": \"a characterization\"}").unwrap();
    let out = run(&["synthesize", s(&ch), "-o", s(&dir.path().join("s.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn bench_once(dir: &Path, tag: &str) -> (String, String) {
    let res = dir.join(format!("{tag}.json"));
    let tl = dir.join(format!("{tag}.csv"));
    let out = run(&[
        "bench",
        s(&fixture("small.json")),
        "-o",
        s(&res),
        "--timeline",
        s(&tl),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (fs::read_to_string(res).unwrap(), fs::read_to_string(tl).unwrap())
}

#[test]
fn bench_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let a = bench_once(dir.path(), "a");
    let b = bench_once(dir.path(), "b");
    assert_eq!(a, b);
    let v: Value = serde_json::from_str(&a.0).unwrap();
    assert!(v["overall_throughput_ops_s"].as_f64().unwrap() > 0.0);
    assert!(a.1.lines().count() > 1);
}

#[test]
fn bench_five_second_run() {
    let dir = TempDir::new().unwrap();
    let spec: Value = serde_json::from_str(&fs::read_to_string(fixture("small.json")).unwrap()).unwrap();
    let mut spec = spec;
    spec["phases"][0]["duration_s"] = Value::from(5.0);
    let path = dir.path().join("five.json");
    fs::write(&path, spec.to_string()).unwrap();
    let res = dir.path().join("r.json");
    let out = run(&["bench", s(&path), "-o", s(&res)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(res).unwrap()).unwrap();
    assert!((v["duration_s"].as_f64().unwrap() - 5.0).abs() < 0.5);
}

#[test]
fn bench_invalid_spec_names_the_path() {
    let dir = TempDir::new().unwrap();
    let out = run(&["bench", s(&fixture("bad_spec.json")), "-o", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("$.phases"));
}

#[test]
fn tune_replay_reproduces_golden_journal() {
    let dir = TempDir::new().unwrap();
    let journal = dir.path().join("j.jsonl");
    let best = dir.path().join("best.ini");
    let out = run(&[
        "--config",
        s(&fixture("tune.conf")),
        "tune",
        s(&fixture("small.json")),
        "--journal",
        s(&journal),
        "--best",
        s(&best),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(&journal).unwrap(),
        fs::read_to_string(fixture("golden_journal.jsonl")).unwrap()
    );
    assert!(fs::read_to_string(best).unwrap().contains("[DBOptions]"));
}

#[test]
fn tune_single_iteration_measures_initial_options() {
    let dir = TempDir::new().unwrap();
    let journal = dir.path().join("j.jsonl");
    let out = run(&[
        "--config",
        s(&fixture("tune.conf")),
        "tune",
        s(&fixture("small.json")),
        "--journal",
        s(&journal),
        "--best",
        s(&dir.path().join("best.ini")),
        "--max-iterations",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = journal_lines(&journal);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["index"], 0);
    assert_eq!(lines[0]["delta_from_prev"], Value::Array(Vec::new()));
    assert_eq!(lines[0]["accepted"], true);
}

#[test]
fn interrupted_tune_resumes_from_its_journal() {
    let dir = TempDir::new().unwrap();
    let journal = dir.path().join("j.jsonl");
    let best = dir.path().join("best.ini");
    let spec = fixture("small.json");
    let args = [
        "tune",
        s(&spec),
        "--journal",
        s(&journal),
        "--best",
        s(&best),
        "--max-iterations",
        "1000",
    ];
    let child = kvtune()
        .args(["--advisor", "scripted"])
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let start = Instant::now();
    // Count only complete lines; the writer may be mid-line.
    while fs::read_to_string(&journal).unwrap_or_default().matches('\n').count() < 2 {
        assert!(start.elapsed() < Duration::from_secs(300), "no progress");
        thread::sleep(Duration::from_millis(50));
    }
    let killed = Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(killed.success());
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(130), "{}", String::from_utf8_lossy(&out.stderr));

    let before = journal_lines(&journal);
    assert!(before.len() >= 2);
    for (i, it) in before.iter().enumerate() {
        assert_eq!(it["index"], i);
    }
    let target = (before.len() + 1).to_string();
    let out = kvtune()
        .args(["--advisor", "scripted"])
        .args(&args[..args.len() - 1])
        .arg(&target)
        .arg("--resume")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let after = journal_lines(&journal);
    assert_eq!(after.len(), before.len() + 1);
    assert_eq!(&after[..before.len()], &before[..]);
}

#[test]
fn remote_advisor_without_key_exits_3() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "--advisor",
        "remote",
        "tune",
        s(&fixture("small.json")),
        "--journal",
        s(&dir.path().join("j.jsonl")),
        "--best",
        s(&dir.path().join("best.ini")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("KVTUNE_API_KEY"));
}

#[test]
fn config_file_rejects_keys() {
    let dir = TempDir::new().unwrap();
    let conf = dir.path().join("c.conf");
    fs::write(&conf, "advisor.api_key = secret\n").unwrap();
    let out = run(&["--config", s(&conf), "report", s(&fixture("golden_journal.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_of_empty_journal_is_header_only() {
    let dir = TempDir::new().unwrap();
    let journal = dir.path().join("empty.jsonl");
    fs::write(&journal, "").unwrap();
    let csv = dir.path().join("r.csv");
    let out = run(&["report", s(&journal), "--csv", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(csv).unwrap(),
        "iteration,accepted,throughput_ops_s,p99_us,changed_options\n"
    );
}

#[test]
fn report_numbers_match_the_journal() {
    let dir = TempDir::new().unwrap();
    let journal = fixture("golden_journal.jsonl");
    let csv = dir.path().join("r.csv");
    let out = run(&["report", s(&journal), "--csv", s(&csv)]);
    assert!(out.status.success());
    let lines = journal_lines(&journal);
    let text = fs::read_to_string(csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), lines.len());
    for (row, it) in rows.iter().zip(&lines) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], it["index"].to_string());
        let tput: f64 = cols[2].parse().unwrap();
        let p99: f64 = cols[3].parse().unwrap();
        assert_eq!(tput.to_bits(), it["result"]["overall_throughput_ops_s"].as_f64().unwrap().to_bits());
        assert_eq!(p99.to_bits(), it["result"]["overall_p99_us"].as_f64().unwrap().to_bits());
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("best: iteration"));
}

#[test]
fn report_missing_journal_is_an_input_error() {
    let out = run(&["report", "/nonexistent/j.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}
