use std::path::Path;
use std::process::{Command, Output};

fn prescribe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prescribe")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = prescribe(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const ARTIFACTS: [&str; 9] = [
    "log.csv",
    "log.csv.format.toml",
    "pre/train.jsonl",
    "pre/test.jsonl",
    "train.mdp",
    "test.mdp",
    "opt.policy",
    "sim.json",
    "rq1.json",
];

fn pipeline(dir: &Path) -> String {
    let mut out = String::new();
    let seed = ["--seed", "7", "--scenario", "fines"];
    let run = |args: &[&str]| ok(dir, &[args, &seed[..]].concat());
    out += &run(&["generate", "--template", "fines", "--traces", "600", "--out", "log.csv", "--truth", "truth"]);
    out += &run(&["preprocess", "--input", "log.csv", "--out-dir", "pre", "--min-variant-fraction", "0"]);
    out += &run(&["build-mdp", "--input", "pre/train.jsonl", "--out", "train.mdp", "--dot", "train.dot"]);
    out += &run(&["build-mdp", "--input", "pre/test.jsonl", "--out", "test.mdp"]);
    out += &run(&[
        "train",
        "--mdp",
        "train.mdp",
        "--out",
        "opt.policy",
        "--episodes",
        "4000",
        "--diagnostics",
        "diag.jsonl",
    ]);
    out += &run(&["train", "--mdp", "train.mdp", "--out", "cust.policy", "--kind", "customary"]);
    out += &run(&["train", "--mdp", "train.mdp", "--out", "rand.policy", "--kind", "random"]);
    out += &run(&[
        "simulate",
        "--mdp",
        "test.mdp",
        "--policy",
        "opt.policy",
        "--policy",
        "cust.policy",
        "--policy",
        "rand.policy",
        "--cases",
        "20000",
        "--json",
        "sim.json",
    ]);
    out += &run(&[
        "evaluate",
        "rq1",
        "--log",
        "pre/test.jsonl",
        "--mdp",
        "train.mdp",
        "--policy",
        "opt.policy",
        "--json",
        "rq1.json",
    ]);
    out += &run(&[
        "evaluate",
        "rq2",
        "--log",
        "pre/test.jsonl",
        "--mdp",
        "train.mdp",
        "--policy",
        "opt.policy",
        "--max-prefix",
        "6",
        "--series",
        "rq2",
    ]);
    out
}

#[test]
fn synthetic_pipeline_runs_end_to_end_and_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let stdout = pipeline(a.path());
    assert!(stdout.contains("600 fines traces written"));
    assert!(stdout.contains("train 360, test 240"));
    assert!(stdout.contains("Non-Optimal P."));
    let table: Vec<&str> = stdout.lines().skip_while(|l| !l.starts_with("Policy")).skip(2).take(3).collect();
    assert!(table[0].starts_with("Optimal"), "{stdout}");
    assert!(table[2].starts_with("Random"), "{stdout}");
    for f in
        ["train.dot", "diag.jsonl", "rq2.delta.tsv", "rq2.count.tsv", "truth.mdp", "truth.policy", "pre/scenario.toml"]
    {
        assert!(a.path().join(f).exists(), "{f} missing");
    }

    pipeline(b.path());
    for f in ARTIFACTS {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "seed = 7\n[generate]\ntraces = 50\n").unwrap();
    ok(dir.path(), &["--config", "run.toml", "generate", "--out", "a.csv"]);
    ok(dir.path(), &["generate", "--seed", "7", "--traces", "50", "--out", "b.csv"]);
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));

    std::fs::write(dir.path().join("bad.toml"), "sead = 7\n").unwrap();
    let out = prescribe(dir.path(), &["--config", "bad.toml", "generate", "--out", "c.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));
}

#[test]
fn unknown_subcommand_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = prescribe(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_mdp_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = prescribe(dir.path(), &["train", "--mdp", "nope.mdp", "--out", "p.policy"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cannot read `nope.mdp`"), "{stderr}");
    assert!(stderr.contains("No such file"), "{stderr}");
    let out = prescribe(dir.path(), &["serve", "--mdp", "nope.mdp", "--policy", "p.policy"]);
    assert!(!out.status.success());
}

#[test]
fn corrupt_artifact_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.mdp"), "not an artifact").unwrap();
    let out = prescribe(dir.path(), &["train", "--mdp", "bad.mdp", "--out", "p.policy"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid MDP artifact"));
}
