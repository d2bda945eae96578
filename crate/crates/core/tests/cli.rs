use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const EXE: &str = env!("CARGO_BIN_EXE_infocl");

fn infocl(args: &[&str], cwd: &Path) -> Output {
    Command::new(EXE)
        .args(args)
        .current_dir(cwd)
        .env_remove("INFOCL_OUT")
        .output()
        .unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const QUICK: &[&str] = &["--epochs-new", "1", "--epochs-replay", "1", "--tasks", "2", "--memory-budget", "3"];

fn quick_train(cwd: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    infocl(&args, cwd)
}

#[test]
fn gen_data_writes_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = infocl(&["gen-data", "--spec", "default", "--seed", "7", "--out", "corpus.jsonl"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["corpus.jsonl", "corpus.test.jsonl", "corpus.meta.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let lines = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 40 * 100);

    let out = infocl(&["split", "--data", "corpus.jsonl", "--tasks", "10", "--out", "split.json"], dir.path());
    assert!(out.status.success());
    let split: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("split.json")).unwrap()).unwrap();
    assert_eq!(split["tasks"].as_array().unwrap().len(), 10);
}

#[test]
fn usage_and_config_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = infocl(&["train", "--bogus-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(infocl(&["no-such-command"], dir.path()).status.code(), Some(2));

    std::fs::write(dir.path().join("bad.json"), r#"{"tau_fs": -1.0}"#).unwrap();
    assert_eq!(infocl(&["train", "--config", "bad.json"], dir.path()).status.code(), Some(3));
    assert_eq!(infocl(&["train", "--tasks", "99"], dir.path()).status.code(), Some(3));
    let out = infocl(&["train", "--data", "missing.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(infocl(&["--help"], dir.path()).status.success());
}

#[test]
fn run_directory_layout_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = quick_train(dir.path(), "run", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in [
        "manifest.json",
        "config.json",
        "metrics.csv",
        "report.json",
        "split.json",
        "memory.tsv",
        "past_reps.tsv",
        "checkpoint.json",
        "reps_final.tsv",
        "analogous.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("task,acc,task_1,task_2\n"));
    let final_acc = metrics.lines().last().unwrap().split(',').nth(1).unwrap().to_string();

    let out = infocl(&["evaluate", "--run", "run"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let pooled = text.lines().find(|l| l.starts_with("all,")).unwrap();
    assert_eq!(pooled, format!("all,{final_acc}"));

    let out = infocl(&["mi", "--run", "run", "--mode", "representation-label", "--mine-epochs", "3"], dir.path());
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["representation-label"]["raw"].is_number());
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let mut args = vec!["train", "--out", "envrun"];
    args.extend_from_slice(QUICK);
    let out = Command::new(EXE)
        .args(&args)
        .current_dir(dir.path())
        .env("INFOCL_OUT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("envrun/metrics.csv").exists());
}

#[test]
fn ablate_runs_every_seed_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--flag", "no-fs", "--seeds", "5", "--out", "abl"];
    args.extend_from_slice(QUICK);
    let out = infocl(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("abl/no-fs");
    for s in 0..5 {
        let config: serde_json::Value =
            serde_json::from_slice(&std::fs::read(root.join(format!("seed-{s}/config.json"))).unwrap()).unwrap();
        assert_eq!(config["no_fs"], true);
        assert_eq!(config["seed"], s);
    }
    let agg = std::fs::read_to_string(root.join("aggregate.csv")).unwrap();
    let lines: Vec<&str> = agg.lines().collect();
    assert_eq!(lines[0], "task,runs,acc_mean,acc_std");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,5,"));
}

#[test]
fn report_semantics() {
    let dir = tempfile::tempdir().unwrap();
    assert!(quick_train(dir.path(), "a", &["--seed", "1"]).status.success());
    assert!(quick_train(dir.path(), "b", &["--seed", "1"]).status.success());
    assert!(quick_train(dir.path(), "c", &["--seed", "2", "--no-cp"]).status.success());
    let before = snapshot(dir.path());

    let out = infocl(&["report", "a"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[3] == "0"));

    let single = std::fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    let acc: Vec<String> = single.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    let out = infocl(&["report", "a", "b", "--out", "agg.csv"], dir.path());
    assert!(out.status.success());
    let agg = std::fs::read_to_string(dir.path().join("agg.csv")).unwrap();
    let means: Vec<String> = agg.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().to_string()).collect();
    assert_eq!(means, acc);
    assert!(dir.path().join("agg.analogous.csv").exists());

    let out = infocl(&["report", "a", "c"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different configurations"));

    let out = infocl(&["report", "a", "--baseline", "c"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("task,runs,acc_mean,acc_std,baseline_mean,baseline_std,delta"));

    let mut after = snapshot(dir.path());
    after.remove(&dir.path().join("agg.csv"));
    after.remove(&dir.path().join("agg.analogous.csv"));
    assert_eq!(before, after);
}

#[test]
fn ten_task_report_has_ten_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = infocl(
        &["train", "--out", "r", "--epochs-new", "1", "--epochs-replay", "1", "--memory-budget", "2"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = infocl(&["report", "r"], dir.path());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().take_while(|l| !l.is_empty()).count(), 11);
}
