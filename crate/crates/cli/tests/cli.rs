use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attn-adapter"))
        .args(args)
        .output()
        .expect("spawn cli")
}

fn ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_archive(dir: &Path) -> PathBuf {
    let path = dir.join("small.atna");
    ok(&[
        "synth",
        "--n-classes",
        "4",
        "--shots",
        "4",
        "--queries",
        "6",
        "--dim",
        "12",
        "--locals",
        "3",
        "--seed",
        "2",
        "--out",
        s(&path),
    ]);
    path
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_archive(dir.path());
    let ckpt = dir.path().join("c.atnc");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "3",
        "--shots",
        "4",
        "--batch-size",
        "8",
        "--out",
        s(&ckpt),
    ]);

    let history = std::fs::read_to_string(dir.path().join("c.atnc.history.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = history
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 4);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["epoch"], i);
        for key in ["lr", "loss", "train_acc"] {
            assert!(r[key].is_f64(), "{key} missing in {r}");
        }
    }

    let manifest = json(&dir.path().join("c.atnc.manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["epochs"], 3);
    assert!(manifest["seeds"]["init"].is_u64());
    assert!(manifest["wall_clock_secs"].is_f64());
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("small.atna.manifest.json").exists());
}

#[test]
fn eval_metrics_schema_and_report_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_archive(dir.path());
    let zs = dir.path().join("zs.json");
    let tip = dir.path().join("tip.json");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--method",
        "zeroshot",
        "--shots",
        "4",
        "--report",
        s(&zs),
    ]);
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--method",
        "tip",
        "--alpha",
        "1",
        "--beta",
        "5.5",
        "--shots",
        "4",
        "--split",
        "novel",
        "--report",
        s(&tip),
    ]);

    let m = json(&zs);
    let keys: Vec<&str> = m.as_object().unwrap().keys().map(String::as_str).collect();
    for key in [
        "method",
        "archive",
        "split",
        "K",
        "seed",
        "accuracy",
        "per_class_acc",
    ] {
        assert!(keys.contains(&key), "missing {key}");
    }
    assert_eq!(m["per_class_acc"].as_array().unwrap().len(), 4);
    assert_eq!(json(&tip)["per_class_acc"].as_array().unwrap().len(), 2);
    assert!(json(&dir.path().join("tip.json.manifest.json"))["resolved"]["tip"]["alpha"] == 1.0);

    let out = ok(&["report", s(&zs), s(&tip), "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].ends_with("accuracy_pct,delta_pp"));
    assert!(lines[1].ends_with(",-"));
}

#[test]
fn eval_without_report_prints_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_archive(dir.path());
    let out = ok(&[
        "eval",
        "--data",
        s(&data),
        "--method",
        "attn",
        "--shots",
        "4",
    ]);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["method"], "attn");
}

#[test]
fn missing_data_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.atna");
    let out = cli(&[
        "train",
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("c")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.atna"));
    assert!(!dir.path().join("c").exists());
}

#[test]
fn malformed_metrics_fail_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"method\": ").unwrap();
    let out = cli(&["report", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}

#[test]
fn corrupted_gradient_fails_gradcheck() {
    assert!(cli(&["gradcheck", "--instances", "2"]).status.success());
    let out = cli(&["gradcheck", "--corrupt-gradient"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_archive(dir.path());
    // alpha without beta
    assert!(!cli(&[
        "eval",
        "--data",
        s(&data),
        "--method",
        "tip",
        "--alpha",
        "1"
    ])
    .status
    .success());
    // more shots than the archive holds
    assert!(!cli(&["eval", "--data", s(&data), "--shots", "50"])
        .status
        .success());
    // nonpositive temperature
    let out = cli(&[
        "train",
        "--data",
        s(&data),
        "--tau",
        "0",
        "--shots",
        "4",
        "--out",
        s(&dir.path().join("c")),
    ]);
    assert!(!out.status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_attn-adapter"))
        .args(["gradcheck"])
        .env("ATTN_ADAPTER_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn wrong_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_archive(dir.path());
    // an embeddings archive is not a checkpoint
    let out = cli(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&data),
        "--shots",
        "4",
    ]);
    assert!(!out.status.success());
}
