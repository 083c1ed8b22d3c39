use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn quick() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml")
}

fn tcpllm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcpllm")).args(args).current_dir(cwd).output().expect("spawn tcpllm")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = tcpllm(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    tcpllm(args, cwd).status.code().expect("exit code")
}

/// Simulates, builds an oracle pool and trains an RL checkpoint in `dir`.
fn pipeline(dir: &Path) {
    let q = quick();
    let q = q.to_str().unwrap();
    ok(&["collect", "--oracle", "--config", q, "--out", "pool.jsonl"], dir);
    ok(&["train", "--mode", "rl", "--pool", "pool.jsonl", "--config", q, "--out", "rl.ckpt"], dir);
    ok(&["compare", "--scenario", "cubic-bbr", "--ckpt", "rl.ckpt", "--config", q, "--out", "cmp"], dir);
}

fn median_col(csv: &str, flow: &str, col: usize) -> f64 {
    let mut v: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[1] == flow)
        .map(|f| f[col].parse().unwrap())
        .collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn simulate_writes_trace_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let q = quick();
    let q = q.to_str().unwrap();
    ok(&["simulate", "--config", q, "--seed", "7", "--out", "a"], dir.path());
    ok(&["simulate", "--config", q, "--seed", "7", "--out", "b"], dir.path());
    let a = fs::read(dir.path().join("a/trace.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/trace.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "time_s,flow_id,cca,throughput_mbps,loss_rate,rtt_ms,sending_rate_mbps");
    assert_eq!(text.lines().count() - 1, 200);
    assert!(dir.path().join("a/switches.csv").is_file());
    ok(&["simulate", "--config", q, "--seed", "8", "--out", "c"], dir.path());
    assert_ne!(text, fs::read_to_string(dir.path().join("c/trace.csv")).unwrap());
}

#[test]
fn missing_or_bad_config_exits_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&["simulate", "--config", "absent.toml", "--out", "o"], dir.path()), 2);
    fs::write(dir.path().join("bad.toml"), "schema_version = 1\nbogus = 3\n").unwrap();
    assert_eq!(code(&["simulate", "--config", "bad.toml", "--out", "o"], dir.path()), 2);
    fs::write(dir.path().join("v9.toml"), "schema_version = 9\n").unwrap();
    assert_eq!(code(&["simulate", "--config", "v9.toml", "--out", "o"], dir.path()), 2);
}

#[test]
fn collect_from_traces() {
    let dir = TempDir::new().unwrap();
    let q = quick();
    let q = q.to_str().unwrap();
    let mut traces = Vec::new();
    for seed in ["1", "2", "3"] {
        ok(&["simulate", "--config", q, "--seed", seed, "--out", seed], dir.path());
        fs::copy(dir.path().join(format!("{seed}/trace.csv")), dir.path().join(format!("run{seed}.csv"))).unwrap();
        traces.push(format!("run{seed}.csv"));
    }
    let mut args = vec!["collect", "--traces"];
    args.extend(traces.iter().map(String::as_str));
    args.extend(["--out", "pool.jsonl"]);
    let stdout = ok(&args, dir.path());
    assert!(stdout.contains("run1: 2") && stdout.contains("run3: 2"), "{stdout}");
    let pool = fs::read_to_string(dir.path().join("pool.jsonl")).unwrap();
    assert_eq!(pool.lines().count(), 6);

    // The pool is accepted by training and rewritten identically.
    let again = tcpllm::telemetry::ExperiencePool::load(&dir.path().join("pool.jsonl")).unwrap();
    again.save(&dir.path().join("pool2.jsonl")).unwrap();
    assert_eq!(pool, fs::read_to_string(dir.path().join("pool2.jsonl")).unwrap());

    assert_eq!(code(&["collect", "--traces", "--out", "p.jsonl"], dir.path()), 2);
    fs::write(
        dir.path().join("bad.csv"),
        "time_s,flow_id,cca,throughput_mbps,loss_rate,rtt_ms,sending_rate_mbps\n1.0,0,cubic,1,0,1,1\n1.0,1,nope,1,0,1,1\n",
    )
    .unwrap();
    let out = tcpllm(&["collect", "--traces", "bad.csv", "--out", "p.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&["collect", "--traces", "absent.csv", "--out", "p.jsonl"], dir.path()), 3);
}

#[test]
fn train_modes_and_reproducibility() {
    let dir = TempDir::new().unwrap();
    let q = quick();
    let q = q.to_str().unwrap();
    ok(&["collect", "--oracle", "--config", q, "--out", "pool.jsonl"], dir.path());
    let rl = ok(&["train", "--mode", "rl", "--pool", "pool.jsonl", "--config", q, "--out", "rl.ckpt"], dir.path());
    assert!(rl.contains("test_acc"), "{rl}");
    ok(&["train", "--mode", "sl", "--dataset", "pool.jsonl", "--config", q, "--out", "sl.ckpt"], dir.path());
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_ne!(read("rl.ckpt"), read("sl.ckpt"));
    let report = fs::read_to_string(dir.path().join("rl.ckpt.report.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(report.lines().last().unwrap()).unwrap();
    assert!(last["test_acc"].as_f64().unwrap() >= 0.95, "{last}");
    for p in ["rl.ckpt.json", "rl.ckpt.report.jsonl", "sl.ckpt.json"] {
        assert!(dir.path().join(p).is_file(), "{p}");
    }
    ok(&["train", "--mode", "rl", "--pool", "pool.jsonl", "--config", q, "--out", "rl2.ckpt"], dir.path());
    assert_eq!(read("rl.ckpt"), read("rl2.ckpt"));
    assert_eq!(read("rl.ckpt.report.jsonl"), read("rl2.ckpt.report.jsonl"));

    assert_eq!(code(&["train", "--mode", "rl", "--dataset", "pool.jsonl", "--out", "x.ckpt"], dir.path()), 2);
    let mut bytes = read("rl.ckpt");
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    fs::write(dir.path().join("rl.ckpt"), bytes).unwrap();
    assert_eq!(code(&["compare", "--scenario", "cubic-bbr", "--ckpt", "rl.ckpt", "--config", q, "--out", "c"], dir.path()), 4);
}

#[test]
fn compare_and_report() {
    let dir = TempDir::new().unwrap();
    pipeline(dir.path());
    let cmp = dir.path().join("cmp");
    let static_trace = fs::read_to_string(cmp.join("static_trace.csv")).unwrap();
    assert!(median_col(&static_trace, "0", 3) > median_col(&static_trace, "1", 3));
    for f in ["summary.json", "oracle_decisions.csv", "policy_decisions.csv", "policy_switches.csv"] {
        assert!(cmp.join(f).is_file(), "{f}");
    }
    let cdf = fs::read_to_string(cmp.join("cdf/policy_flow1_throughput_mbps.csv")).unwrap();
    let pts: Vec<(f64, f64)> = cdf
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    assert!((pts.last().unwrap().1 - 1.0).abs() < 1e-12);

    assert_eq!(code(&["compare", "--scenario", "reno-bbr", "--ckpt", "rl.ckpt", "--out", "x"], dir.path()), 2);

    let q = quick();
    for scenario in ["cubic-bbr", "pcc-bbr", "bbr-pcc"] {
        let out = format!("cmp_{scenario}");
        ok(&["compare", "--scenario", scenario, "--ckpt", "rl.ckpt", "--config", q.to_str().unwrap(), "--out", &out], dir.path());
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(&out).join("summary.json")).unwrap()).unwrap();
        let jain = |arm: &str| {
            let a = summary["arms"].as_array().unwrap().iter().find(|a| a["arm"] == arm).unwrap();
            a["settled"]["jain"].as_f64().unwrap()
        };
        assert!(jain("policy") >= jain("static"), "{scenario}: policy {} static {}", jain("policy"), jain("static"));
    }

    let table = ok(&["report", "--in", "cmp", "--emit", "cdf"], dir.path());
    let mut keys: Vec<(String, String)> = table
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<_> = l.split(',').collect();
            (f[0].to_string(), f[2].to_string())
        })
        .collect();
    keys.dedup();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 9);
    let boxes = ok(&["report", "--in", "cmp", "--emit", "box"], dir.path());
    assert_eq!(boxes.lines().next().unwrap(), "arm,flow_id,metric,min,q1,median,q3,max");
    assert_eq!(boxes.lines().count(), 1 + 3 * 2 * 3);
    for l in boxes.lines().skip(1) {
        let v: Vec<f64> = l.split(',').skip(3).map(|x| x.parse().unwrap()).collect();
        assert!(v.windows(2).all(|w| w[0] <= w[1]), "{l}");
    }
    assert_eq!(boxes, ok(&["report", "--in", "cmp", "--emit", "box"], dir.path()));
    let summary = ok(&["report", "--in", "cmp", "--emit", "summary"], dir.path());
    assert!(summary.contains("policy") && summary.contains("jain"));
    assert_eq!(code(&["report", "--in", "absent", "--emit", "cdf"], dir.path()), 2);
}
