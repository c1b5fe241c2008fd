//! The `avsr` binary end to end on a tiny corpus: exit codes 0, 2 and 3.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
sentences = 6

[ae_train]
steps = 2

[msr_train]
steps = 3

[joint_train]
steps = 2

[eval]
held_out = 2
snr = ["clean", "0"]
max_len = 12
"#;

fn avsr(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsr"))
        .env("AVSR_DATA_ROOT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tiny_root() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), TINY).unwrap();
    let out = avsr(dir.path(), &["synth-corpus"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn every_subcommand_runs_on_a_tiny_corpus() {
    let dir = tiny_root();
    let root = dir.path();
    assert!(root.join("corpus").is_dir());
    for phase in ["ae", "msr", "joint"] {
        let out = avsr(root, &["train", phase]);
        assert_eq!(
            code(&out),
            0,
            "train {phase}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(root
            .join("checkpoints")
            .join(format!("{phase}.avsr"))
            .is_file());
    }
    let csv = root.join("wer.csv");
    let out = avsr(root, &["eval", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("snr,A,V,AV,VA,VAV"), "{text}");
    assert_eq!(text.lines().count(), 3);

    let dump = root.join("utt0000.avsr");
    let out = avsr(
        root,
        &[
            "enhance",
            "--id",
            "utt0000",
            "--out",
            dump.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dump.is_file());

    let out = avsr(root, &["decode", "--id", "utt0000", "--mode", "AV"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out.stdout.is_empty());
}

#[test]
fn unknown_utterance_is_a_data_error() {
    let dir = tiny_root();
    let out = avsr(dir.path(), &["train", "msr"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        code(&avsr(
            dir.path(),
            &["decode", "--id", "utt9999", "--mode", "AV"]
        )),
        3
    );
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), TINY).unwrap();
    assert_eq!(code(&avsr(dir.path(), &["train", "msr"])), 3);
}

#[test]
fn missing_checkpoints_are_config_errors() {
    let dir = tiny_root();
    assert_eq!(code(&avsr(dir.path(), &["eval"])), 2);
    assert_eq!(code(&avsr(dir.path(), &["train", "joint"])), 2);
}

#[test]
fn bad_configuration_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), "[eval]\nheld_out = 500\n").unwrap();
    assert_eq!(code(&avsr(dir.path(), &["synth-corpus"])), 2);
    std::fs::write(dir.path().join("config.toml"), "[model]\nunit = \"lstm\"\n").unwrap();
    assert_eq!(code(&avsr(dir.path(), &["synth-corpus"])), 2);
    let dir = tiny_root();
    assert_eq!(code(&avsr(dir.path(), &["train", "lstm"])), 2);
}
