use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medvr::train::{read_log, LogRecord};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn medvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medvr"))
        .args(args)
        .env("MEDVR_LOG_LEVEL", "warn")
        .output()
        .expect("spawn medvr")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "medvr failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let cfg = fixture("tiny.cfg");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    medvr(&args)
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Parses a one-row metrics CSV into (header, values).
fn metrics(text: &str) -> Vec<(String, f64)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    header.into_iter().map(String::from).zip(values).collect()
}

fn metric(m: &[(String, f64)], key: &str) -> f64 {
    m.iter().find(|(k, _)| k == key).unwrap().1
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(train(&a, &[]));
    ok(train(&b, &[]));
    for f in ["manifest.json", "config.toml", "train.csv", "trajectories.jsonl", "checkpoint.json", "eval.csv"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    assert_eq!(read(&a.join("train.csv")), read(&b.join("train.csv")));
    assert_eq!(read(&a.join("trajectories.jsonl")), read(&b.join("trajectories.jsonl")));

    let csv = String::from_utf8(read(&a.join("train.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let manifest: serde_json::Value = serde_json::from_slice(&read(&a.join("manifest.json"))).unwrap();
    assert!(manifest.get("config_hash").is_some(), "{manifest}");
}

#[test]
fn zero_iterations_checkpoints_without_rollouts() {
    let tmp = tempfile::tempdir().unwrap();
    ok(train(tmp.path(), &["--iterations", "0"]));
    assert!(tmp.path().join("checkpoint.json").exists());
    assert!(read_log(&tmp.path().join("trajectories.jsonl")).unwrap().is_empty());
    let csv = String::from_utf8(read(&tmp.path().join("train.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn missing_required_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("missing_m.cfg");
    let out = medvr(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("evr.m_rollouts"));
}

#[test]
fn unreachable_policy_exits_with_policy_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(tmp.path(), &["--policy", "tcp:127.0.0.1:1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    ok(train(&full, &[]));
    ok(train(&split, &["--iterations", "2", "--checkpoint-every", "1"]));
    ok(train(&split, &["--resume", "--iterations", "4"]));
    assert_eq!(read(&full.join("train.csv")), read(&split.join("train.csv")));
    assert_eq!(read(&full.join("trajectories.jsonl")), read(&split.join("trajectories.jsonl")));
    assert_eq!(read(&full.join("eval.csv")), read(&split.join("eval.csv")));
}

#[test]
fn baselines_bracket_the_task() {
    let cfg = fixture("tiny.cfg");
    let cfg = cfg.to_str().unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["eval", "--config", cfg, "--n-tasks", "64"];
        args.extend_from_slice(extra);
        metrics(&String::from_utf8(ok(medvr(&args)).stdout).unwrap())
    };
    let oracle = run(&["--baseline", "oracle"]);
    assert_eq!(metric(&oracle, "accuracy"), 1.0);
    assert!(metric(&oracle, "mIoU") > 0.99);
    assert!(metric(&oracle, "mean_tool_calls") >= 1.0);

    let random = run(&["--baseline", "random-answer"]);
    assert!(metric(&random, "accuracy") < 0.4);
    assert_eq!(metric(&random, "mean_tool_calls"), 0.0);

    let zoom = run(&["--baseline", "random-zoom"]);
    assert!(metric(&zoom, "mIoU") < 0.2);

    let untrained = run(&[]);
    assert_eq!(metric(&untrained, "n_tasks"), 64.0);
}

#[test]
fn eval_of_checkpoint_reproduces_training_eval() {
    let tmp = tempfile::tempdir().unwrap();
    ok(train(tmp.path(), &[]));
    let ck = tmp.path().join("checkpoint.json");
    let out = ok(medvr(&["eval", "--checkpoint", ck.to_str().unwrap()]));
    assert_eq!(String::from_utf8(out.stdout).unwrap().into_bytes(), read(&tmp.path().join("eval.csv")));
}

#[test]
fn analyze_modes_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    ok(train(tmp.path(), &[]));
    let log = tmp.path().join("trajectories.jsonl");
    let log_s = log.to_str().unwrap();

    let cost = String::from_utf8(ok(medvr(&["analyze", log_s, "--mode", "cost"])).stdout).unwrap();
    assert!(cost.starts_with("iteration,generated_tokens,shared_prefix_tokens,independent_tokens,savings_ratio"), "{cost}");
    assert_eq!(cost.lines().count(), 1 + 4);

    let usage = String::from_utf8(ok(medvr(&["analyze", log_s, "--mode", "tool-usage"])).stdout).unwrap();
    assert_eq!(usage.lines().count(), 1 + 4);

    let out = tmp.path().join("entropy.csv");
    ok(medvr(&["analyze", log_s, "--mode", "entropy-iou", "--out", out.to_str().unwrap()]));
    let text = String::from_utf8(read(&out)).unwrap();
    assert!(text.starts_with("iou_bin,mean_tool_entropy,count"), "{text}");

    // Replayed tool rewards equal the logged ones.
    let cfg = fixture("tiny.cfg");
    let replay = String::from_utf8(ok(medvr(&["cca-replay", log_s, "--config", cfg.to_str().unwrap()])).stdout).unwrap();
    let logged: std::collections::HashMap<u64, f64> = read_log(&log)
        .unwrap()
        .into_iter()
        .filter_map(|r| match r {
            LogRecord::Trajectory(t) => Some((t.id, t.reward.unwrap().r_tool)),
            _ => None,
        })
        .collect();
    let mut rows = 0;
    for line in replay.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let id: u64 = f[0].parse().unwrap();
        let r_tool: f64 = f[2].parse().unwrap();
        assert_eq!(logged[&id], r_tool, "trajectory {id}");
        rows += 1;
    }
    assert_eq!(rows, logged.len());
}

#[test]
fn analyze_rejects_empty_log() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("empty.jsonl");
    std::fs::write(&log, "").unwrap();
    let out = medvr(&["analyze", log.to_str().unwrap(), "--mode", "cost"]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn gen_tasks_writes_grids() {
    let tmp = tempfile::tempdir().unwrap();
    ok(medvr(&["gen-tasks", "--n", "3", "--out-dir", tmp.path().to_str().unwrap()]));
    let files: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().collect();
    assert_eq!(files.len(), 3);
}
