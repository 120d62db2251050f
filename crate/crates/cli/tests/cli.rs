use std::path::Path;
use std::process::{Command, Output};

fn protoscan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoscan")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = protoscan(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let common = ["--preset", "toy", "--seed", "3"];
    let run = |name: &str, rest: &[&str]| {
        let mut a: Vec<&str> = common.to_vec();
        let dir = format!("runs/{name}");
        a.extend(["--run-dir", dir.as_str()]);
        a.extend(rest);
        ok(d, &a)
    };
    run(
        "synth",
        &["synth", "--out", "data", "--train", "10", "--test-normal", "3", "--test-abnormal", "3", "--val-normal", "2", "--val-abnormal", "2"],
    );
    assert_eq!(std::fs::read_to_string(d.join("data/manifest.jsonl")).unwrap().lines().count(), 20);
    run("train", &["train", "--data", "data", "--epochs", "1"]);
    let ck = "runs/train/checkpoint.spck";
    assert!(d.join(ck).exists());
    let manifest = json(&d.join("runs/train/run.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["train"]["epochs"], 1);

    let first = run("eval1", &["eval", "--checkpoint", ck, "--data", "data"]);
    let second = run("eval2", &["eval", "--checkpoint", ck, "--data", "data"]);
    assert_eq!(first, second);
    assert!(first.contains("S_org only AUROC"));
    let r1 = std::fs::read(d.join("runs/eval1/report.json")).unwrap();
    assert_eq!(r1, std::fs::read(d.join("runs/eval2/report.json")).unwrap());
    let report = json(&d.join("runs/eval1/report.json"));
    assert_eq!(report["per_image"].as_array().unwrap().len(), 6);
    assert!(report["tuned_weights"].is_object());

    run("score", &["score", "--checkpoint", ck, "--data", "data"]);
    assert_eq!(std::fs::read_to_string(d.join("runs/score/scores.jsonl")).unwrap().lines().count(), 6);
    run("maps", &["emit-maps", "--checkpoint", ck, "--data", "data", "--limit", "2"]);
    let maps: Vec<_> = std::fs::read_dir(d.join("runs/maps/maps")).unwrap().collect();
    assert_eq!(maps.len(), 4);
}

#[test]
fn missing_checkpoint_fails_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = protoscan(tmp.path(), &["--run-dir", "r", "eval", "--checkpoint", "nowhere/ck.spck", "--data", "data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere/ck.spck"), "{err}");
}

#[test]
fn missing_dataset_fails_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = protoscan(tmp.path(), &["--preset", "toy", "--run-dir", "r", "train", "--data", "absent_dir"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent_dir"));
}

#[test]
fn conflicting_preset_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "preset = \"toy\"\n").unwrap();
    let out = protoscan(tmp.path(), &["--preset", "paper-shape", "--config", "c.toml", "scan-dump", "--h", "4", "--w", "4", "--direction", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.toml"));
}

#[test]
fn scan_dump_prints_visit_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(tmp.path(), &["--run-dir", "r", "scan-dump", "--h", "4", "--w", "4", "--direction", "0"]);
    let mut steps: Vec<usize> =
        text.lines().skip(1).flat_map(|l| l.split_whitespace().map(|t| t.parse::<usize>().unwrap())).collect();
    steps.sort_unstable();
    assert_eq!(steps, (0..16).collect::<Vec<_>>());
    assert!(tmp.path().join("r/run.json").exists());
    assert!(!protoscan(tmp.path(), &["scan-dump", "--h", "4", "--w", "4", "--direction", "8"]).status.success());
}

#[test]
fn bench_and_grad_check_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = ok(tmp.path(), &["--run-dir", "b", "bench-scan", "--lengths", "64,128", "--reps", "2"]);
    assert_eq!(csv.lines().next(), Some("L,median_ns"));
    assert_eq!(csv.lines().count(), 3);
    let text = ok(tmp.path(), &["--run-dir", "g", "grad-check", "--samples", "30", "--images", "1"]);
    assert!(text.starts_with("checked"));
    assert_eq!(json(&tmp.path().join("g/grad_check.json"))["passed"], true);
}
