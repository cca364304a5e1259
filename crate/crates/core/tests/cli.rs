use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 12] = [
    "files=12",
    "heldout_files=4",
    "d_model=16",
    "mlp_hidden=32",
    "max_seq_len=160",
    "window=128",
    "rank=4",
    "pretrain_steps=5",
    "steps=3",
    "batch_size=4",
    "stage2_steps=3",
    "stage2_queries=4",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_selfracg"));
    cmd.arg("--run-dir").arg(dir);
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().unwrap()
}

fn error_line(o: &Output) -> String {
    let err = String::from_utf8_lossy(&o.stderr);
    err.lines().find(|l| l.starts_with("error kind=")).unwrap_or("").to_string()
}

#[test]
fn errors_are_one_line_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error kind=missing_input:"), "{o:?}");

    let o = run(dir.path(), &["--set", "bogus=1", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error kind=config_violation:"));

    let o = run(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error kind=usage:"));
}

#[test]
fn stale_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["synth"]).status.success());
    assert!(run(dir.path(), &["chunk"]).status.success());
    std::fs::write(dir.path().join("outputs/train_pairs.jsonl"), "").unwrap();
    let o = run(dir.path(), &["pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error kind=hash_mismatch:"), "{o:?}");
}

#[test]
fn full_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["all"]);
    assert!(o.status.success(), "{o:?}");
    let table = std::fs::read_to_string(dir.path().join("report/table.txt")).unwrap();
    for s in ["none", "similar", "next_fragment", "next_query", "self"] {
        assert!(table.lines().any(|l| l.starts_with(s)), "{table}");
    }
    assert!(dir.path().join("manifests/eval.json").exists());
    let o = run(dir.path(), &["invariance", "--probes", "10"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 mismatching logits over 10 probes"));
}
