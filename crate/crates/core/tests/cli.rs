use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 2
[paths]
train = "data/train.jsonl"
val = "data/val.jsonl"
test = "data/test.jsonl"
run_dir = "run"
limit = 40
[train]
hidden = 16
epochs = 2
[refinement]
rounds = 1
finetune_epochs = 1
"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agent-router"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["--config", "nope.toml", "prepare"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn invalid_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nhidden = 0\n").unwrap();
    assert_eq!(code(&cli(dir.path(), &["--config", "bad.toml", "prepare"])), 2);
}

#[test]
fn corrupt_dataset_line_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    std::fs::create_dir_all(dir.path().join("data")).unwrap();
    for split in ["train", "val", "test"] {
        std::fs::write(
            dir.path().join(format!("data/{split}.jsonl")),
            "{\"id\": \"a\", \"question\": \"Who?\", \"context\": \"Ann Lee.\", \"answers\": [\"Ann Lee\"]}\n{not json\n",
        )
        .unwrap();
    }
    let out = cli(dir.path(), &["--config", "run.toml", "prepare"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.jsonl:2"));
}

#[test]
fn stage_without_predecessor_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    assert_eq!(code(&cli(dir.path(), &["--config", "run.toml", "prepare", "--synthetic"])), 0);
    let out = cli(dir.path(), &["--config", "run.toml", "train"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("score-agents"));
}

#[test]
fn staged_commands_run_in_order() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "run.toml"];
        full.extend_from_slice(args);
        let out = cli(dir.path(), &full);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["prepare", "--synthetic"]);
    assert!(dir.path().join("data/train.jsonl").exists());
    run(&["score-agents"]);
    assert!(run(&["train"]).contains("best epoch"));
    assert!(run(&["diagnose"]).contains("priority"));
    run(&["refine", "--rounds", "1"]);
    run(&["tune-adaptive"]);
    let infer: serde_json::Value = serde_json::from_str(&run(&["infer", "--tau", "1.0", "--kmin", "8", "--kmax", "8"])).unwrap();
    assert_eq!(infer["mean_calls"], 8.0);
    assert_eq!(infer["queries"], 40);
    let table = run(&["eval", "--baseline"]);
    assert!(table.contains("adaptive") && table.contains("full-pool vote"), "{table}");
    let predictions = std::fs::read_to_string(dir.path().join("run/predictions/test.jsonl")).unwrap();
    assert_eq!(predictions.lines().count(), 40);
}

#[test]
fn bad_adaptive_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    for args in [&["prepare", "--synthetic"][..], &["score-agents"][..], &["train"][..]] {
        let mut full = vec!["--config", "run.toml"];
        full.extend_from_slice(args);
        assert_eq!(code(&cli(dir.path(), &full)), 0);
    }
    let out = cli(dir.path(), &["--config", "run.toml", "infer", "--kmin", "5", "--kmax", "3"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("typo.toml"), "[train]\nhiden = 16\n").unwrap();
    let out = cli(dir.path(), &["--config", "typo.toml", "prepare"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));
}
