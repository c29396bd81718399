use std::path::Path;
use std::process::{Command, Output};

fn dkap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkap")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dkap(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn generate_simulate_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    ok(&["gen-data", "--n", "40", "--seed", "3", "--distractors", "2", "--out", &p("stream.jsonl")]);
    assert_eq!(lines(&dir.path().join("stream.jsonl")), 40);

    let again = p("again.jsonl");
    ok(&["gen-data", "--n", "40", "--seed", "3", "--distractors", "2", "--out", &again]);
    assert_eq!(std::fs::read(p("stream.jsonl")).unwrap(), std::fs::read(&again).unwrap());

    std::fs::write(p("baseline.toml"), "feedback_policy = \"NONE\"\n[generator]\nmode = \"NONE\"\n").unwrap();
    let table = ok(&["simulate", "--stream", &p("stream.jsonl"), "--out-dir", &p("run")]);
    assert!(table.contains("Reading"));
    ok(&["simulate", "--stream", &p("stream.jsonl"), "--config", &p("baseline.toml"), "--out-dir", &p("base")]);
    for f in ["records.jsonl", "report.json", "kb.jsonl"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    assert_eq!(lines(&dir.path().join("run/records.jsonl")), 40);

    let summary = ok(&["report", "--records", &p("run/records.jsonl"), "--baseline", &p("base/records.jsonl")]);
    assert!(summary.contains("baseline") && summary.contains('%'), "{summary}");

    ok(&["export-pairs", "--stream", &p("stream.jsonl"), "--out", &p("pairs.jsonl")]);
    ok(&["export-training", "--stream", &p("stream.jsonl"), "--strategy", "transfer", "--out", &p("train.jsonl")]);
    assert_eq!(lines(&dir.path().join("train.jsonl")), 80);
}

#[test]
fn weighted_generation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.jsonl");
    ok(&["gen-data", "--n", "5", "--weight", "3=4", "--weight", "1=0.5", "--out", out.to_str().unwrap()]);
    let bad = dkap(&["gen-data", "--n", "5", "--weight", "99=1", "--out", out.to_str().unwrap()]);
    assert!(!bad.status.success());
}

#[test]
fn lexicon_from_docs_and_augment() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    std::fs::write(
        p("docs.jsonl"),
        concat!(
            r#"{"construct_id":"ipcrm","doc_text":"Delete IPC (Inter-process Communication) resources.\nMore information: https://manned.org/ipcrm."}"#,
            "\n",
            r#"{"construct_id":"rm","doc_text":"Remove files or directories."}"#,
            "\n",
            r#"{"construct_id":"empty","doc_text":"   "}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = dkap(&["build-lexicon", "--docs", &p("docs.jsonl"), "--mode", "first_line", "--domain", "cmd", "--out", &p("lex.jsonl")]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: record 3"));
    assert_eq!(lines(&dir.path().join("lex.jsonl")), 2);

    std::fs::write(p("pairs.jsonl"), r#"{"x":"Delete a shared memory segment","y":"ipcrm --shmem-id {{id}}"}"#).unwrap();
    ok(&["augment", "--pairs", &p("pairs.jsonl"), "--lexicon", &p("lex.jsonl"), "--out", &p("aug.jsonl")]);
    let aug = std::fs::read_to_string(p("aug.jsonl")).unwrap();
    assert!(aug.contains("\"value\":\"ipcrm\"") && !aug.contains("\"value\":\"rm\""));
}

#[test]
fn cost_reduction_command() {
    let out = ok(&["cost", "--base-reading", "100", "--base-error", "180", "--reading", "100", "--error", "112"]);
    assert!(out.contains("reduction 24.3%"), "{out}");
    assert!(out.contains("-24.3%"));
}

#[test]
fn aborted_simulation_keeps_partial_records() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    ok(&["gen-data", "--n", "3", "--out", &p("stream.jsonl")]);
    std::fs::write(
        p("llm.toml"),
        "[generator.backend]\nkind = \"llm\"\nendpoint = \"http://127.0.0.1:9/complete\"\nmax_retries = 0\ntimeout_secs = 2\n",
    )
    .unwrap();
    let out = dkap(&["simulate", "--stream", &p("stream.jsonl"), "--config", &p("llm.toml"), "--out-dir", &p("run")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("aborted after 0 steps"));
    assert!(dir.path().join("run/records.jsonl").exists());
}
