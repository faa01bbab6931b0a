//! End-to-end runs of the `qvqa` binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn qvqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qvqa")).args(args).output().expect("binary runs")
}

fn qvqa_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qvqa"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            );
        }
    }
    out
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
    for d in [&d1, &d2] {
        let out = qvqa(&["gen-data", "--seed", "5", "--count", "4", "--out", &d.path().to_string_lossy()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (dir_bytes(d1.path()), dir_bytes(d2.path()));
    assert_eq!(a, b);
    // 2 image tensors per scene plus the jsonl, vocab, and config files.
    let qvt = a.keys().filter(|k| k.ends_with(".qvt")).count();
    assert_eq!(qvt, 8);
    assert!(a.contains_key("dataset.jsonl"));
    assert!(a.contains_key("run_config.json"));
}

#[test]
fn gen_data_rejects_zero_count_and_bad_env_seed() {
    let d = tempdir().unwrap();
    let out = qvqa(&["gen-data", "--seed", "1", "--count", "0", "--out", &d.path().to_string_lossy()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("count"));

    let out = qvqa_env(
        &["gen-data", "--count", "1", "--out", &d.path().to_string_lossy()],
        "QVQA_SEED",
        "not-a-number",
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("QVQA_SEED"));
}

#[test]
fn env_seed_matches_the_explicit_flag() {
    let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
    let out = qvqa(&["gen-data", "--seed", "42", "--count", "3", "--out", &d1.path().to_string_lossy()]);
    assert!(out.status.success());
    let out = qvqa_env(
        &["gen-data", "--count", "3", "--out", &d2.path().to_string_lossy()],
        "QVQA_SEED",
        "42",
    );
    assert!(out.status.success());
    assert_eq!(dir_bytes(d1.path()), dir_bytes(d2.path()));
}

#[test]
fn verify_only_runs_the_requested_suite() {
    let out = qvqa(&["verify", "--only", "losses"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("[pass] losses:")), "{text}");
    assert!(!text.contains("] gradients:"), "{text}");
    assert!(!text.contains("] metrics:"), "{text}");

    let out = qvqa(&["verify", "--only", "nonsense"]);
    assert!(!out.status.success());
}

#[test]
fn pretrain_then_eval_is_reproducible() {
    let data = tempdir().unwrap();
    let out = qvqa(&["gen-data", "--seed", "3", "--count", "5", "--out", &data.path().to_string_lossy()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = tempdir().unwrap();
    let small = [
        "--set", "model.d_model=16",
        "--set", "model.heads=2",
        "--set", "model.visual_layers=1",
        "--set", "model.text_layers=1",
        "--set", "model.qft_layers=1",
        "--set", "model.gen_layers=1",
        "--set", "model.m=2",
        "--set", "train.batch_size=5",
        "--set", "train.epochs=1",
        "--set", "train.train_on_all=true",
    ];
    let data_str = data.path().to_string_lossy();
    let run_str = run.path().to_string_lossy();
    let mut args = vec![
        "pretrain",
        "--data", &data_str,
        "--out", &run_str,
        "--preset", "report-gen",
        "--seed", "0",
    ];
    args.extend_from_slice(&small);
    let out = qvqa(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.path().join("config.json").exists());
    assert!(run.path().join("metrics.csv").exists());
    assert!(run.path().join("best/manifest.json").exists());
    let cfg = std::fs::read_to_string(run.path().join("config.json")).unwrap();
    assert!(cfg.contains("\"loss.lambda_c\": 9.0"), "{cfg}");

    let (e1, e2) = (tempdir().unwrap(), tempdir().unwrap());
    for e in [&e1, &e2] {
        let out = qvqa(&[
            "eval",
            "--checkpoint", &run.path().to_string_lossy(),
            "--data", &data.path().to_string_lossy(),
            "--out", &e.path().to_string_lossy(),
            "--split", "all",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(e1.path().join("eval.json")).unwrap();
    let b = std::fs::read(e2.path().join("eval.json")).unwrap();
    assert_eq!(a, b);
    let parsed: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(parsed["summary"]["BLEU4"].is_f64() || parsed["summary"]["BLEU4"].is_number());
    assert_eq!(parsed["records"].as_array().unwrap().len(), 5);

    // A checkpoint missing one tensor file fails to load.
    let best = run.path().join("best");
    let mut names: Vec<String> = std::fs::read_dir(&best)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension().is_some_and(|x| x == "qvt")).then(|| p.to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    std::fs::remove_file(&names[0]).unwrap();
    let out = qvqa(&[
        "eval",
        "--checkpoint", &run.path().to_string_lossy(),
        "--data", &data.path().to_string_lossy(),
        "--out", &tempdir().unwrap().path().to_string_lossy(),
        "--split", "all",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(".qvt") || stderr.contains("tensor"), "{stderr}");
}

#[test]
fn pretrain_requires_data() {
    let out = qvqa(&["pretrain", "--out", "/tmp/x", "--preset", "report-gen"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn full_verify_passes_with_exit_zero() {
    let out = qvqa(&["verify"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("[FAIL]"), "{text}");
    for suite in ["gradients", "losses", "buffers", "metrics"] {
        assert!(text.contains(&format!("] {suite}:")), "{text}");
    }
}

#[test]
fn eval_rejects_unknown_splits() {
    let out = qvqa(&[
        "eval",
        "--checkpoint", "/nonexistent",
        "--data", "/nonexistent",
        "--out", "/tmp/x",
        "--split", "test",
    ]);
    // Fails on the missing data before the split matters.
    assert!(!out.status.success());
}
