//! End-to-end tests of the `dael` binary: pipeline smoke, determinism,
//! config precedence and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn dael(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dael"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn gen_tiny(dir: &Path) {
    let out = dael(
        &[
            "gendata",
            "--out",
            "data",
            "--train-per-domain",
            "24",
            "--test-per-domain",
            "12",
            "--seed",
            "5",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn pipeline_smoke_gendata_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    gen_tiny(tmp.path());
    for d in 0..4 {
        assert!(tmp.path().join(format!("data/domain{d}_train.ds")).exists());
        assert!(tmp.path().join(format!("data/domain{d}_test.ds")).exists());
    }

    let out = dael(
        &[
            "train", "--data", "data", "--target", "3", "--mode", "uda", "--epochs", "1",
            "--batch", "8", "--target-batch", "8", "--seed", "3", "--ckpt", "m.ck",
            "--history", "h.jsonl",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let line = stdout(&out);
    assert!(line.starts_with("accuracy 0."), "expected accuracy line, got {line}");
    assert!(tmp.path().join("m.ck").exists());
    let history = std::fs::read_to_string(tmp.path().join("h.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    assert!(history.contains("\"l_ce\""));

    let out = dael(
        &["eval", "--ckpt", "m.ck", "--test", "data/domain3_test.ds"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("accuracy 0."));
}

#[test]
fn same_seed_produces_byte_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    gen_tiny(tmp.path());
    for name in ["a.ck", "b.ck"] {
        let out = dael(
            &[
                "train", "--data", "data", "--target", "0", "--mode", "dg", "--epochs", "1",
                "--batch", "8", "--seed", "7", "--ckpt", name, "--history", "h.jsonl",
            ],
            tmp.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = std::fs::read(tmp.path().join("a.ck")).unwrap();
    let b = std::fs::read(tmp.path().join("b.ck")).unwrap();
    assert_eq!(a, b, "checkpoints must match byte for byte");
}

#[test]
fn flag_overrides_config_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("c.toml"),
        "[synth]\ntrain_per_domain = 24\ntest_per_domain = 10\nseed = 2\n",
    )
    .unwrap();
    // file value applies
    let out = dael(
        &["gendata", "--config", "c.toml", "--out", "d1"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("24 train / 10 test"));
    // flag beats file
    let out = dael(
        &[
            "gendata", "--config", "c.toml", "--out", "d2", "--train-per-domain", "16",
        ],
        tmp.path(),
    );
    assert!(out.status.success());
    assert!(stdout(&out).contains("16 train / 10 test"));
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "[synth]\nbananas = 4\n").unwrap();
    let out = dael(
        &["gendata", "--config", "c.toml", "--out", "d"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bananas"), "{}", stderr(&out));
}

#[test]
fn exit_codes_match_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    // bad invocation: unknown flag
    let out = dael(&["train", "--bogus-flag"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    // bad invocation: unknown subcommand
    let out = dael(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    // contract/format error: evaluating garbage files
    std::fs::write(tmp.path().join("junk.ck"), b"not a checkpoint").unwrap();
    std::fs::write(tmp.path().join("junk.ds"), b"not a dataset").unwrap();
    let out = dael(
        &["eval", "--ckpt", "junk.ck", "--test", "junk.ds"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error"));
}

#[test]
fn ablate_writes_records_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dael(
        &[
            "gendata", "--out", "data", "--train-per-domain", "16", "--test-per-domain", "8",
            "--seed", "5",
        ],
        tmp.path(),
    );
    assert!(out.status.success());
    let out = dael(
        &[
            "ablate", "--data", "data", "--suite", "loss-ladder", "--seeds", "1", "--jobs",
            "2", "--epochs", "1", "--out", "r.jsonl", "--table", "r.txt",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    // 4 ladder variants x 4 targets x 1 seed
    let records = std::fs::read_to_string(tmp.path().join("r.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 16);
    let table = std::fs::read_to_string(tmp.path().join("r.txt")).unwrap();
    assert!(table.contains("loss-ladder") && table.contains("ce+cr"));
    assert!(stdout(&out).contains("full"));
}

#[test]
fn preview_augment_writes_png() {
    let tmp = tempfile::tempdir().unwrap();
    gen_tiny(tmp.path());
    let out = dael(
        &[
            "preview-augment", "--data", "data", "--domain", "1", "--count", "4", "--out",
            "grid.png",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let bytes = std::fs::read(tmp.path().join("grid.png")).unwrap();
    assert_eq!(&bytes[..8], &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]);
}

#[test]
fn unknown_suite_is_rejected_with_candidates() {
    let tmp = tempfile::tempdir().unwrap();
    gen_tiny(tmp.path());
    let out = dael(
        &["ablate", "--data", "data", "--suite", "nonsense"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("loss-ladder"));
}
