use std::path::Path;
use std::process::{Command, Output};

fn lloco(artifacts: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lloco"))
        .arg("--artifacts")
        .arg(artifacts)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "lloco {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn end_to_end_on_a_short_pretraining_run() {
    let tmp = tempfile::tempdir().unwrap();
    let art = tmp.path().join("artifacts");
    let data = tmp.path().join("data");
    let p = |path: &Path| path.to_str().unwrap().to_string();

    let report = lloco(&art, &["pretrain", "--steps", "20", "--cache", &p(&tmp.path().join("cache"))]);
    let report: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert!(report["recon_loss_with_summaries"].is_number());

    lloco(&art, &["synth", "--out", &p(&data), "--docs", "3", "--chunks", "2", "--group", "kv"]);
    lloco(&art, &["preprocess", "--corpus", &p(&data.join("corpus")), "--groups", &p(&data.join("groups.json"))]);
    let log = tmp.path().join("steps.csv");
    lloco(&art, &["finetune", "--train", &p(&data.join("train.jsonl")), "--group", "kv", "--max-steps", "3", "--log", &p(&log)]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);

    let answer = lloco(&art, &["query", "what is the code for ab?", "--mode", "lloco", "--doc", "kv-doc000"]);
    let answer: serde_json::Value = serde_json::from_slice(&answer.stdout).unwrap();
    assert_eq!(answer["adaptor_id"].as_str().unwrap(), "kv-r8-s0");
    assert_eq!(answer["composition"]["summary_rows"], 8);

    let results = tmp.path().join("results");
    lloco(&art, &["eval", "--dataset", &p(&data.join("train.jsonl")), "--mode", "no_context", "--mode", "lloco", "--out", &p(&results)]);
    let csv = std::fs::read_to_string(results.join("results.csv")).unwrap();
    assert!(csv.starts_with("# name="));
    assert_eq!(csv.lines().count(), 4);

    let lat = tmp.path().join("latency");
    lloco(&art, &["bench", "latency", "--sizes", "240,1k", "--out", &p(&lat)]);
    let csv = std::fs::read_to_string(lat.join("results.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("context_tokens,"));
    assert!(csv.lines().any(|l| l.starts_with("1024,")));
    assert!(lat.join("results.json").exists());
}

#[test]
fn commands_without_artifacts_explain_what_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lloco"))
        .args(["--artifacts", tmp.path().join("none").to_str().unwrap(), "query", "hi"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));
}
