use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[network]\ndepth = 1\nbase_filters = 2\nskip_connections = 1\n\n\
[training]\nepochs = 1\nlr = 1e-3\nbatch_size = 2\nfolds = 3\n\n\
[data]\nstudent_modality = \"Flair\"\ncrop = 0\nsubsample = 1\n";

fn kdseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdseg"))
        .args(args)
        .env_remove("KDSEG_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(root: &Path, subjects: &str) -> std::path::PathBuf {
    let data = root.join("data");
    let out = kdseg(&[
        "synth-data",
        "--out",
        s(&data),
        "--subjects",
        subjects,
        "--size",
        "8",
        "--seed",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn tiny_config(root: &Path) -> std::path::PathBuf {
    let path = root.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn synth_data_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3");
    assert!(data.join("dataset.toml").is_file());
    assert!(data.join("synth_000/synth_000_seg.nii.gz").is_file());
    assert!(data.join("synth_002/synth_002_flair.nii.gz").is_file());
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = kdseg(&["synth-data", "--out", "x", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = kdseg(&["train-sideways"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3");
    let out = kdseg(&[
        "train-teacher",
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("run")),
        "--set",
        "lambda=2",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}

#[test]
fn teacher_student_evaluate_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "6");
    let cfg = tiny_config(dir.path());
    let teacher_dir = dir.path().join("teacher");
    let out = kdseg(&[
        "train-teacher",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&teacher_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher epoch=1"));
    for f in [
        "resolved_config.toml",
        "folds.csv",
        "metrics.csv",
        "best.ckpt",
        "last.ckpt",
        "scores.json",
    ] {
        assert!(teacher_dir.join(f).is_file(), "{f}");
    }
    let ckpt = teacher_dir.join("best.ckpt");

    let student_dir = dir.path().join("student");
    let out = kdseg(&[
        "train-student",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&student_dir),
        "--teacher",
        s(&ckpt),
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stderr.is_empty());
    assert!(student_dir.join("best.ckpt").is_file());

    let eval_dir = dir.path().join("eval");
    let out = kdseg(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&student_dir.join("best.ckpt")),
        "--data",
        s(&data),
        "--fold",
        "0",
        "--out",
        s(&eval_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("scores.json")).unwrap()).unwrap();
    assert_eq!(json["subjects"].as_array().unwrap().len(), 2);

    // a dataset that only declares Flair cannot feed a two-channel teacher
    let mono = dir.path().join("mono");
    fs::create_dir_all(&mono).unwrap();
    for entry in fs::read_dir(&data).unwrap() {
        let entry = entry.unwrap();
        if entry.path().is_dir() {
            let target = mono.join(entry.file_name());
            fs::create_dir_all(&target).unwrap();
            for file in fs::read_dir(entry.path()).unwrap() {
                let file = file.unwrap();
                fs::copy(file.path(), target.join(file.file_name())).unwrap();
            }
        }
    }
    fs::write(mono.join("dataset.toml"), "modalities = [\"Flair\"]\n").unwrap();
    let out = kdseg(&[
        "train-student",
        "--config",
        s(&cfg),
        "--data",
        s(&mono),
        "--out",
        s(&dir.path().join("bad")),
        "--teacher",
        s(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3");
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("ablation");
    let out = kdseg(&[
        "ablate",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 30);
    let md = fs::read_to_string(out_dir.join("results.md")).unwrap();
    assert!(md.contains("| Skip connections | Model | Loss | ET | TC | WT |"));
    assert!(out_dir.join("resolved_config.toml").is_file());
}
