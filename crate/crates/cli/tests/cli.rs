//! End-to-end checks of the `retention` binary: artifact layout, exit
//! codes, determinism, and the smoke-speed budget.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retention"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should spawn")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

/// Small cohort plus a 12-iteration schedule: enough to exercise every
/// artifact without waiting on convergence.
const TINY: &str = r#"
seed = 11

[cohort]
n_students = 150

[schedule]
batch_size = 16
phases = [{ iterations = 12, learning_rate = 0.001 }]
"#;

fn read(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn generate_prints_summary_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = run(
        &["--config", &config, "generate", "--out", "a.jsonl"],
        dir.path(),
    );
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("students"), "summary header: {stdout}");
    assert!(stdout.contains("dropouts"), "summary rows: {stdout}");

    let out = run(
        &["--config", &config, "generate", "--out", "b.jsonl"],
        dir.path(),
    );
    assert_success(&out);
    assert_eq!(
        std::fs::read(dir.path().join("a.jsonl")).unwrap(),
        std::fs::read(dir.path().join("b.jsonl")).unwrap(),
        "same config and seed must regenerate identical bytes"
    );
}

#[test]
fn generate_into_missing_directory_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = run(
        &[
            "--config",
            &config,
            "generate",
            "--out",
            "no/such/dir/a.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no/such/dir"), "stderr: {stderr}");
}

#[test]
fn train_writes_checkpoint_trace_and_test_split_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = run(
        &["--config", &config, "generate", "--out", "cohort.jsonl"],
        dir.path(),
    );
    assert_success(&out);

    for out_dir in ["run1", "run2"] {
        let out = run(
            &[
                "--config",
                &config,
                "train",
                "--data",
                "cohort.jsonl",
                "--out-dir",
                out_dir,
            ],
            dir.path(),
        );
        assert_success(&out);
    }
    let trace1 = read(&dir.path().join("run1/holdout.trace.csv"));
    let trace2 = read(&dir.path().join("run2/holdout.trace.csv"));
    assert_eq!(trace1, trace2, "repeated runs must produce identical traces");
    assert_eq!(
        trace1.lines().count(),
        12,
        "one trace line per iteration"
    );
    assert!(dir.path().join("run1/holdout.ckpt").is_file());
    assert!(dir.path().join("run1/holdout.test.jsonl").is_file());
    let summary = read(&dir.path().join("run1/train-summary.json"));
    assert!(summary.contains("\"final_loss\""), "summary: {summary}");
}

#[test]
fn exploding_learning_rate_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
seed = 11

[cohort]
n_students = 80

[schedule]
batch_size = 16
phases = [{ iterations = 60, learning_rate = 1e6 }]
"#,
    );
    let out = run(
        &["--config", &config, "generate", "--out", "cohort.jsonl"],
        dir.path(),
    );
    assert_success(&out);
    let out = run(
        &[
            "--config",
            &config,
            "train",
            "--data",
            "cohort.jsonl",
            "--out-dir",
            "run",
        ],
        dir.path(),
    );
    assert_code(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("diverged"), "stderr: {stderr}");
}

#[test]
fn evaluate_writes_metrics_and_breakdown_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    assert_success(&run(
        &["--config", &config, "generate", "--out", "cohort.jsonl"],
        dir.path(),
    ));
    assert_success(&run(
        &[
            "--config",
            &config,
            "train",
            "--data",
            "cohort.jsonl",
            "--out-dir",
            "run",
        ],
        dir.path(),
    ));
    let out = run(
        &[
            "--config",
            &config,
            "evaluate",
            "--checkpoint",
            "run/holdout.ckpt",
            "--data",
            "run/holdout.test.jsonl",
            "--out-dir",
            "run",
        ],
        dir.path(),
    );
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("dropout accuracy"), "table: {stdout}");

    let metrics = read(&dir.path().join("run/metrics.json"));
    assert!(metrics.contains("\"version\": 1"), "metrics: {metrics}");
    let buckets = read(&dir.path().join("run/note_buckets.csv"));
    assert!(buckets.lines().count() >= 2, "buckets: {buckets}");
    assert!(buckets.starts_with("bucket_low,"), "header: {buckets}");
    let causes = read(&dir.path().join("run/cause_accuracy.csv"));
    assert!(
        causes.lines().count() <= 16,
        "at most a header plus 15 cause rows: {causes}"
    );
}

#[test]
fn evaluate_with_mismatched_note_width_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    assert_success(&run(
        &["--config", &config, "generate", "--out", "cohort.jsonl"],
        dir.path(),
    ));
    assert_success(&run(
        &[
            "--config",
            &config,
            "train",
            "--data",
            "cohort.jsonl",
            "--out-dir",
            "run",
        ],
        dir.path(),
    ));
    let narrow_path = dir.path().join("narrow.toml");
    std::fs::write(&narrow_path, format!("{TINY}\n[model]\nnote_embed_dim = 32\n")).unwrap();
    let narrow = narrow_path.display().to_string();
    let out = run(
        &[
            "--config",
            &narrow,
            "evaluate",
            "--checkpoint",
            "run/holdout.ckpt",
            "--data",
            "run/holdout.test.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 4);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("expected 64") && stderr.contains("got 32"),
        "the mismatch message must list both widths: {stderr}"
    );
}

#[test]
fn evaluate_on_empty_dataset_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    assert_success(&run(
        &["--config", &config, "generate", "--out", "cohort.jsonl"],
        dir.path(),
    ));
    assert_success(&run(
        &[
            "--config",
            &config,
            "train",
            "--data",
            "cohort.jsonl",
            "--out-dir",
            "run",
        ],
        dir.path(),
    ));
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = run(
        &[
            "--config",
            &config,
            "evaluate",
            "--checkpoint",
            "run/holdout.ckpt",
            "--data",
            "empty.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 5);
}

#[test]
fn audit_on_single_gender_cohort_exits_six() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
seed = 11

[cohort]
n_students = 100
male_share = 1.0

[schedule]
batch_size = 16
phases = [{ iterations = 6, learning_rate = 0.001 }]
"#,
    );
    assert_success(&run(
        &["--config", &config, "generate", "--out", "cohort.jsonl"],
        dir.path(),
    ));
    assert_success(&run(
        &[
            "--config",
            &config,
            "train",
            "--data",
            "cohort.jsonl",
            "--out-dir",
            "run",
        ],
        dir.path(),
    ));
    let out = run(
        &[
            "--config",
            &config,
            "audit",
            "--checkpoint",
            "run/holdout.ckpt",
            "--data",
            "cohort.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 6);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("single group"), "stderr: {stderr}");
}

#[test]
fn audit_reports_paired_metrics_and_accuracy_delta() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
seed = 11

[cohort]
n_students = 150
gender_dropout_gap = 0.12

[schedule]
batch_size = 16
phases = [{ iterations = 12, learning_rate = 0.001 }]
"#,
    );
    assert_success(&run(
        &["--config", &config, "generate", "--out", "cohort.jsonl"],
        dir.path(),
    ));
    assert_success(&run(
        &[
            "--config",
            &config,
            "train",
            "--data",
            "cohort.jsonl",
            "--out-dir",
            "run",
        ],
        dir.path(),
    ));
    let out = run(
        &[
            "--config",
            &config,
            "audit",
            "--checkpoint",
            "run/holdout.ckpt",
            "--data",
            "cohort.jsonl",
            "--out-dir",
            "run",
            "--mitigation",
            "reweigh",
        ],
        dir.path(),
    );
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("unmitigated"), "stdout: {stdout}");
    assert!(
        stdout.contains("after reweigh mitigation"),
        "stdout: {stdout}"
    );
    let audit = read(&dir.path().join("run/audit.json"));
    for field in [
        "\"before\"",
        "\"after\"",
        "\"accuracy_delta\"",
        "\"statistical_parity_difference\"",
    ] {
        assert!(audit.contains(field), "audit.json missing {field}: {audit}");
    }
}

#[test]
fn kfold_smote_training_never_leaks_synthetics_into_test_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
seed = 11

[cohort]
n_students = 120

[schedule]
batch_size = 16
phases = [{ iterations = 4, learning_rate = 0.001 }]

[smote]
enabled = true
k = 3
"#,
    );
    assert_success(&run(
        &["--config", &config, "generate", "--out", "cohort.jsonl"],
        dir.path(),
    ));
    assert_success(&run(
        &[
            "--config",
            &config,
            "train",
            "--data",
            "cohort.jsonl",
            "--out-dir",
            "run",
            "--kfold",
            "3",
        ],
        dir.path(),
    ));
    let summary = read(&dir.path().join("run/train-summary.json"));
    assert!(summary.contains("\"mode\": \"kfold\""), "summary: {summary}");
    assert!(
        summary.contains("\"synthetic_added\""),
        "summary: {summary}"
    );

    let mut test_ids = Vec::new();
    for f in 0..3 {
        assert!(dir.path().join(format!("run/fold-{f}.ckpt")).is_file());
        assert!(dir.path().join(format!("run/fold-{f}.trace.csv")).is_file());
        let test = read(&dir.path().join(format!("run/fold-{f}.test.jsonl")));
        assert!(
            !test.contains("synth-"),
            "fold {f} test split holds a synthetic record"
        );
        for line in test.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            test_ids.push(v["id"].as_str().unwrap().to_string());
        }
    }
    test_ids.sort();
    let mut expected: Vec<String> = (0..120).map(|i| format!("s{i:05}")).collect();
    expected.sort();
    assert_eq!(test_ids, expected, "test folds must partition the cohort");
}

#[test]
fn smoke_run_finishes_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
seed = 11

[cohort]
n_students = 200

[schedule]
batch_size = 32
phases = [{ iterations = 300, learning_rate = 0.001 }]
"#,
    );
    assert_success(&run(
        &["--config", &config, "generate", "--out", "cohort.jsonl"],
        dir.path(),
    ));
    let start = std::time::Instant::now();
    let out = run(
        &[
            "--config",
            &config,
            "train",
            "--data",
            "cohort.jsonl",
            "--out-dir",
            "run",
        ],
        dir.path(),
    );
    assert_success(&out);
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "smoke training took {elapsed:?}, budget is one minute"
    );
    let trace = read(&dir.path().join("run/holdout.trace.csv"));
    assert_eq!(trace.lines().count(), 300);
}
