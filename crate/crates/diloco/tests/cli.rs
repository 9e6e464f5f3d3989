//! End-to-end checks of the binary: artifact layout, sidecar reproduction,
//! and error reporting. All runs here are tiny (a handful of inner steps).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diloco"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary should launch");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Tiny-config override args shared by the tests: 5 sequential steps on a
/// miniature model so each subprocess finishes in well under a second.
fn tiny_overrides(corpus: &Path) -> Vec<String> {
    [
        &format!("corpus_path={}", corpus.display()) as &str,
        "k=2",
        "h=2",
        "t=2",
        "pretrain_steps=1",
        "embed_dim=4",
        "hidden_dim=8",
        "context_len=4",
        "batch_size=4",
        "eval_batches=1",
        "val_frac=0.2",
        "kmeans_iters=3",
        "warmup_steps=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn gen_corpus(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus.txt");
    run_ok(bin().args(["gen-corpus", "--docs", "40", "--topics", "3", "--doc-bytes", "300", "--seed", "7", "--out"]).arg(&corpus));
    corpus
}

/// The one artifact triple (csv, json sidecar, params) a run directory holds.
fn run_artifacts(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let mut csv = None;
    let mut json = None;
    let mut params = None;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".csv") {
            assert!(csv.replace(path).is_none(), "more than one csv in {}", dir.display());
        } else if name.ends_with(".json") {
            assert!(json.replace(path).is_none(), "more than one sidecar in {}", dir.display());
        } else if name.ends_with(".params.bin") {
            assert!(params.replace(path).is_none(), "more than one params file in {}", dir.display());
        }
    }
    (csv.expect("run csv"), json.expect("json sidecar"), params.expect("params file"))
}

#[test]
fn train_writes_artifacts_and_sidecar_rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path());

    let out_a = dir.path().join("a");
    let run = run_ok(bin().args(["train", "--out-dir"]).arg(&out_a).args(tiny_overrides(&corpus)));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("final val ppl"), "missing summary line: {stdout}");

    let (csv_a, sidecar, params_a) = run_artifacts(&out_a);

    // Reproduce the run from nothing but its sidecar.
    let out_b = dir.path().join("b");
    run_ok(bin().args(["train", "--config"]).arg(&sidecar).arg("--out-dir").arg(&out_b));
    let (csv_b, _, params_b) = run_artifacts(&out_b);

    assert_eq!(csv_a.file_name(), csv_b.file_name(), "sidecar rerun must map to the same run id");
    assert_eq!(
        std::fs::read(&csv_a).unwrap(),
        std::fs::read(&csv_b).unwrap(),
        "metrics must reproduce byte-for-byte"
    );
    assert_eq!(
        std::fs::read(&params_a).unwrap(),
        std::fs::read(&params_b).unwrap(),
        "parameters must reproduce byte-for-byte"
    );

    // And the saved parameters evaluate cleanly.
    let eval = run_ok(bin().args(["eval", "--params"]).arg(&params_a).args(tiny_overrides(&corpus)));
    let eval_out = String::from_utf8_lossy(&eval.stdout);
    assert!(eval_out.contains("val ppl"), "eval output: {eval_out}");
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path());

    let mut args = tiny_overrides(&corpus);
    args.push("bogus_knob=1".into());
    let out = bin()
        .args(["train", "--out-dir"])
        .arg(dir.path().join("out"))
        .args(args)
        .output()
        .unwrap();
    assert!(!out.status.success(), "unknown key must fail the run");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_knob"), "error must name the bad key, got: {stderr}");
}

#[test]
fn missing_corpus_is_a_helpful_error() {
    let out = bin().args(["train", "k=2"]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("corpus_path") && stderr.contains("gen-corpus"),
        "error should point at corpus_path and gen-corpus, got: {stderr}"
    );
}
