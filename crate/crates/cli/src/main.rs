//! Reproducible retention-model runs: generate cohorts, train, evaluate,
//! and audit fairness, all driven by one TOML config plus overriding
//! flags.
//!
//! Exit codes are part of the interface:
//! 1 generic failure, 2 invalid path, 3 training diverged (non-finite
//! loss), 4 dimension mismatch, 5 empty test set, 6 single-group dataset.

mod config;
mod pipeline;

use clap::{Parser, Subcommand};
use config::{Mitigation, RunConfig, SplitMode};
use pipeline::{
    check_note_dims, fd_accuracy, fd_outcomes, format_fairness, prepare, train_fold, write_text,
    write_trace, AuditReport,
};
use retention_core::data::{
    generate_cohort, holdout_split, read_dataset, stratified_kfold, write_dataset, CohortSummary,
    DataError, FoldSplit, Gender, StudentRecord,
};
use retention_core::embed::EmbedError;
use retention_core::eval::{evaluate, predict, EVAL_BATCH};
use retention_core::fairness::{compute_metrics, FairnessError};
use retention_core::model::{ModelError, RetentionModel};
use retention_core::train::TrainError;
use serde::Serialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Path { path: String, message: String },
    #[error("training diverged: loss became {loss} at iteration {iteration}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("protected attribute has a single group: {0}")]
    SingleGroup(String),
    #[error("configuration invalid: {0}")]
    Config(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Path { .. } => 2,
            CliError::Diverged { .. } => 3,
            CliError::DimMismatch { .. } => 4,
            CliError::EmptyTestSet => 5,
            CliError::SingleGroup(_) => 6,
            CliError::Config(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, message } => CliError::Path { path, message },
            DataError::Embed(EmbedError::Io { path, message }) => {
                CliError::Path { path, message }
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint { path, message } => CliError::Path { path, message },
            ModelError::NoteDimMismatch { got, expected, .. } => CliError::DimMismatch {
                what: "note embedding width".to_string(),
                expected,
                got,
            },
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { iteration, loss } => CliError::Diverged { iteration, loss },
            TrainError::Model(m) => m.into(),
            TrainError::Fairness(f) => f.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<FairnessError> for CliError {
    fn from(e: FairnessError) -> Self {
        match e {
            FairnessError::EmptyCell { .. } => CliError::SingleGroup(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "retention",
    version,
    about = "Multimodal student-retention modeling: cohorts, training, evaluation, fairness audits"
)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort file and print its marginal summary.
    Generate {
        /// Output dataset path (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Overrides cohort.n_students.
        #[arg(long)]
        students: Option<usize>,
        /// Overrides cohort.signal_strength.
        #[arg(long)]
        signal: Option<f64>,
        /// Overrides cohort.gender_dropout_gap.
        #[arg(long)]
        gender_gap: Option<f64>,
    },
    /// Train per the configured split; writes checkpoints and loss traces.
    Train {
        /// Input dataset path.
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints, traces, and the run summary.
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Overrides schedule.scale.
        #[arg(long)]
        scale: Option<f64>,
        /// Overrides schedule.batch_size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Overrides smote.enabled.
        #[arg(long)]
        smote: Option<bool>,
        /// Overrides fairness.mitigation (none | reweigh | regularizer).
        #[arg(long)]
        mitigation: Option<Mitigation>,
        /// Overrides fairness.eta.
        #[arg(long)]
        eta: Option<f64>,
        /// Forces k-fold mode with this many folds.
        #[arg(long)]
        kfold: Option<usize>,
        /// Forces single holdout mode.
        #[arg(long)]
        holdout: bool,
    },
    /// Score a checkpoint over a dataset; writes the metrics report and
    /// the note-bucket and per-cause breakdown CSVs.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Fairness audit of dropout predictions over the protected attribute;
    /// with a mitigation configured, retrains and reports before/after.
    Audit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Overrides fairness.mitigation (none | reweigh | regularizer).
        #[arg(long)]
        mitigation: Option<Mitigation>,
        /// Overrides fairness.eta.
        #[arg(long)]
        eta: Option<f64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Path {
        path: dir.display().to_string(),
        message: e.to_string(),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::Generate {
            out,
            students,
            signal,
            gender_gap,
        } => cmd_generate(config, &out, students, signal, gender_gap),
        Command::Train {
            data,
            out_dir,
            scale,
            batch_size,
            smote,
            mitigation,
            eta,
            kfold,
            holdout,
        } => {
            let mut config = config;
            if let Some(scale) = scale {
                config.schedule.scale = scale;
                config.schedule.phases = None;
            }
            if let Some(batch_size) = batch_size {
                config.schedule.batch_size = batch_size;
            }
            if let Some(smote) = smote {
                config.smote.enabled = smote;
            }
            if let Some(mitigation) = mitigation {
                config.fairness.mitigation = mitigation;
            }
            if let Some(eta) = eta {
                config.fairness.eta = eta;
            }
            if let Some(k) = kfold {
                config.split.mode = SplitMode::Kfold;
                config.split.k = k;
            }
            if holdout {
                config.split.mode = SplitMode::Holdout;
            }
            config.validate()?;
            cmd_train(config, &data, &out_dir)
        }
        Command::Evaluate {
            checkpoint,
            data,
            out_dir,
        } => cmd_evaluate(config, &checkpoint, &data, &out_dir),
        Command::Audit {
            checkpoint,
            data,
            out_dir,
            mitigation,
            eta,
        } => {
            let mut config = config;
            if let Some(mitigation) = mitigation {
                config.fairness.mitigation = mitigation;
            }
            if let Some(eta) = eta {
                config.fairness.eta = eta;
            }
            config.validate()?;
            cmd_audit(config, &checkpoint, &data, &out_dir)
        }
    }
}

fn cmd_generate(
    config: RunConfig,
    out: &Path,
    students: Option<usize>,
    signal: Option<f64>,
    gender_gap: Option<f64>,
) -> Result<(), CliError> {
    let mut spec = config.cohort.to_spec(config.seed);
    if let Some(n) = students {
        spec.n_students = n;
    }
    if let Some(s) = signal {
        spec.signal_strength = s;
    }
    if let Some(g) = gender_gap {
        spec.gender_dropout_gap = g;
    }
    let records = generate_cohort(&spec)?;
    write_dataset(out, &records)?;
    let summary = CohortSummary::from_records(&records);
    println!("wrote {}", out.display());
    print!("{summary}");
    Ok(())
}

#[derive(Serialize)]
struct FoldSummary {
    name: String,
    checkpoint: String,
    trace: String,
    test_data: String,
    train_size: usize,
    test_size: usize,
    synthetic_added: usize,
    iterations: usize,
    final_loss: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    version: u32,
    mode: String,
    seed: u64,
    folds: Vec<FoldSummary>,
}

fn cmd_train(config: RunConfig, data: &Path, out_dir: &Path) -> Result<(), CliError> {
    let records = read_dataset(data)?;
    if records.is_empty() {
        return Err(CliError::Other(format!(
            "{} holds no records",
            data.display()
        )));
    }
    ensure_dir(out_dir)?;
    let embedder = config.build_embedder()?;
    check_note_dims(config.model.note_embed_dim, &embedder)?;

    let dropout_labels: Vec<bool> = records.iter().map(|r| r.labels.dropout).collect();
    let (mode_name, splits): (&str, Vec<(String, FoldSplit)>) = match config.split.mode {
        SplitMode::Holdout => {
            let split = holdout_split(&dropout_labels, config.split.test_fraction, config.seed)?;
            ("holdout", vec![("holdout".to_string(), split)])
        }
        SplitMode::Kfold => {
            let splits = stratified_kfold(&dropout_labels, config.split.k, config.seed)?;
            (
                "kfold",
                splits
                    .into_iter()
                    .enumerate()
                    .map(|(f, s)| (format!("fold-{f}"), s))
                    .collect(),
            )
        }
    };

    let mitigation = config.fairness.mitigation;
    let eta = config.fairness.eta;
    let mut fold_summaries = Vec::with_capacity(splits.len());
    for (f, (name, split)) in splits.into_iter().enumerate() {
        let train_records: Vec<StudentRecord> =
            split.train.iter().map(|&i| records[i].clone()).collect();
        let test_records: Vec<StudentRecord> =
            split.test.iter().map(|&i| records[i].clone()).collect();
        let fold_seed = config
            .seed
            .wrapping_add((f as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let artifacts = train_fold(
            train_records,
            &config,
            &embedder,
            mitigation,
            eta,
            fold_seed,
        )?;

        let checkpoint = out_dir.join(format!("{name}.ckpt"));
        let trace = out_dir.join(format!("{name}.trace.csv"));
        let test_data = out_dir.join(format!("{name}.test.jsonl"));
        artifacts.model.save_checkpoint(&checkpoint)?;
        write_trace(&trace, &artifacts.report.trace)?;
        write_dataset(&test_data, &test_records)?;
        let final_loss = artifacts.report.trace.last().copied().unwrap_or(f64::NAN);
        println!(
            "{name}: trained on {} ({} synthetic), {} iterations, final loss {final_loss:.6} -> {}",
            artifacts.train_size,
            artifacts.lineage.len(),
            artifacts.report.trace.len(),
            checkpoint.display()
        );
        fold_summaries.push(FoldSummary {
            name,
            checkpoint: checkpoint.display().to_string(),
            trace: trace.display().to_string(),
            test_data: test_data.display().to_string(),
            train_size: artifacts.train_size,
            test_size: test_records.len(),
            synthetic_added: artifacts.lineage.len(),
            iterations: artifacts.report.trace.len(),
            final_loss,
        });
    }

    let summary = TrainSummary {
        version: 1,
        mode: mode_name.to_string(),
        seed: config.seed,
        folds: fold_summaries,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Other(e.to_string()))?;
    write_text(&out_dir.join("train-summary.json"), &json)?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    version: u32,
    report: &'a retention_core::eval::EvalReport,
}

fn cmd_evaluate(
    config: RunConfig,
    checkpoint: &Path,
    data: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut model = RetentionModel::load_checkpoint(checkpoint)?;
    let records = read_dataset(data)?;
    if records.is_empty() {
        return Err(CliError::EmptyTestSet);
    }
    ensure_dir(out_dir)?;
    let embedder = config.build_embedder()?;
    check_note_dims(model.config.note_embed_dim, &embedder)?;
    let prepared = prepare(&records, &embedder)?;
    let outputs = predict(&mut model, &prepared.samples, EVAL_BATCH)?;
    let report = evaluate(
        &outputs,
        &prepared.labels,
        &prepared.note_counts,
        model.config.mask_rule_3,
    )
    .map_err(|e| CliError::Other(e.to_string()))?;

    let doc = MetricsDocument {
        version: 1,
        report: &report,
    };
    let json =
        serde_json::to_string_pretty(&doc).map_err(|e| CliError::Other(e.to_string()))?;
    write_text(&out_dir.join("metrics.json"), &json)?;
    write_text(&out_dir.join("note_buckets.csv"), &report.note_buckets_csv())?;
    write_text(&out_dir.join("cause_accuracy.csv"), &report.per_cause_csv())?;
    print!("{}", report.to_table());
    println!("reports written to {}", out_dir.display());
    Ok(())
}

fn cmd_audit(
    config: RunConfig,
    checkpoint: &Path,
    data: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut model = RetentionModel::load_checkpoint(checkpoint)?;
    let records = read_dataset(data)?;
    if records.is_empty() {
        return Err(CliError::EmptyTestSet);
    }
    let males = records.iter().filter(|r| r.gender() == Gender::Male).count();
    if males == 0 || males == records.len() {
        let only = if males == 0 { Gender::Female } else { Gender::Male };
        return Err(CliError::SingleGroup(format!(
            "every record is {only:?}; group metrics need both genders"
        )));
    }
    ensure_dir(out_dir)?;
    let embedder = config.build_embedder()?;
    check_note_dims(model.config.note_embed_dim, &embedder)?;
    let prepared = prepare(&records, &embedder)?;

    let before_outcomes = fd_outcomes(&mut model, &prepared)?;
    let before = compute_metrics(&before_outcomes);
    let fd_accuracy_before = fd_accuracy(&before_outcomes);
    println!("unmitigated ({} records):", records.len());
    print!("{}", format_fairness(&before));
    println!("  dropout-head accuracy          {fd_accuracy_before:.4}");

    let mitigation = config.fairness.mitigation;
    let (after, fd_accuracy_after, accuracy_delta) = if mitigation == Mitigation::None {
        (None, None, None)
    } else {
        // Paired run: same seed and schedule, same data, mitigation added.
        let mut retrain_config = config.clone();
        retrain_config.model = crate::config::ModelSection::from_model_config(&model.config);
        let artifacts = train_fold(
            records.clone(),
            &retrain_config,
            &embedder,
            mitigation,
            config.fairness.eta,
            config.seed,
        )?;
        let mut mitigated = artifacts.model;
        let after_outcomes = fd_outcomes(&mut mitigated, &prepared)?;
        let after = compute_metrics(&after_outcomes);
        let fd_after = fd_accuracy(&after_outcomes);
        println!("after {mitigation} mitigation (retrained):");
        print!("{}", format_fairness(&after));
        println!("  dropout-head accuracy          {fd_after:.4}");
        println!(
            "  accuracy delta                 {:+.4}",
            fd_after - fd_accuracy_before
        );
        (
            Some(after),
            Some(fd_after),
            Some(fd_after - fd_accuracy_before),
        )
    };

    let report = AuditReport {
        version: 1,
        protected: config.fairness.protected.clone(),
        mitigation: mitigation.to_string(),
        before,
        fd_accuracy_before,
        after,
        fd_accuracy_after,
        accuracy_delta,
    };
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    write_text(&out_dir.join("audit.json"), &json)?;
    println!("audit written to {}", out_dir.join("audit.json").display());
    Ok(())
}
