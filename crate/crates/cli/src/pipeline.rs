//! Shared plumbing between subcommands: dataset encoding, fold training,
//! prediction, and the audit report shape.

use crate::config::{Mitigation, RunConfig};
use crate::CliError;
use retention_core::cascade::TaskLabels;
use retention_core::data::{
    encode_records, smote_rebalance, StudentRecord, SyntheticLineage,
};
use retention_core::embed::NoteEmbedder;
use retention_core::encoders::SampleInput;
use retention_core::eval::{decide, predict, EVAL_BATCH};
use retention_core::fairness::{reweigh, BinaryOutcome, FairnessReport};
use retention_core::model::RetentionModel;
use retention_core::train::{train, TrainReport};
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Model-ready views of a record list, index-aligned with it.
pub struct Prepared {
    pub samples: Vec<SampleInput>,
    pub labels: Vec<TaskLabels>,
    pub note_counts: Vec<usize>,
    /// Male students form the privileged group.
    pub privileged: Vec<bool>,
}

pub fn prepare(
    records: &[StudentRecord],
    embedder: &NoteEmbedder,
) -> Result<Prepared, CliError> {
    let samples = encode_records(records, embedder)?;
    Ok(Prepared {
        samples,
        labels: records.iter().map(|r| r.labels).collect(),
        note_counts: records.iter().map(|r| r.note_count()).collect(),
        privileged: records
            .iter()
            .map(|r| r.gender() == retention_core::data::Gender::Male)
            .collect(),
    })
}

/// A checkpoint whose note width disagrees with the embedder cannot score
/// the dataset; reject before encoding anything.
pub fn check_note_dims(expected: usize, embedder: &NoteEmbedder) -> Result<(), CliError> {
    if embedder.dim() != expected {
        return Err(CliError::DimMismatch {
            what: "note embedding width".to_string(),
            expected,
            got: embedder.dim(),
        });
    }
    Ok(())
}

pub struct FoldArtifacts {
    pub model: RetentionModel,
    pub report: TrainReport,
    pub lineage: Vec<SyntheticLineage>,
    pub train_size: usize,
}

/// Trains one model on `train_records` under the configured pipeline:
/// optional minority oversampling, then optional reweighing or the
/// group-gap regularizer, then the two-phase schedule.
pub fn train_fold(
    train_records: Vec<StudentRecord>,
    config: &RunConfig,
    embedder: &NoteEmbedder,
    mitigation: Mitigation,
    eta: f64,
    fold_seed: u64,
) -> Result<FoldArtifacts, CliError> {
    let (train_records, lineage) = if config.smote.enabled {
        let outcome = smote_rebalance(
            &train_records,
            config.smote.k,
            config.smote.target_ratio,
            fold_seed.wrapping_add(0x5157),
        )?;
        (outcome.records, outcome.lineage)
    } else {
        (train_records, Vec::new())
    };
    let prepared = prepare(&train_records, embedder)?;
    let weights = match mitigation {
        Mitigation::Reweigh => {
            let positive: Vec<bool> = prepared.labels.iter().map(|l| l.dropout).collect();
            Some(reweigh(&prepared.privileged, &positive)?)
        }
        _ => None,
    };
    let (group_gap_eta, privileged) = match mitigation {
        Mitigation::Regularizer => (eta, Some(prepared.privileged.as_slice())),
        _ => (0.0, None),
    };
    let model_config = config.model.to_model_config();
    check_note_dims(model_config.note_embed_dim, embedder)?;
    let mut model = RetentionModel::new(model_config, fold_seed)?;
    let train_config = config
        .schedule
        .to_train_config(fold_seed.wrapping_add(0x7261), group_gap_eta);
    let report = train(
        &mut model,
        &prepared.samples,
        &prepared.labels,
        weights.as_deref(),
        privileged,
        &train_config,
    )?;
    Ok(FoldArtifacts {
        model,
        report,
        lineage,
        train_size: train_records.len(),
    })
}

/// One loss value per line, in iteration order.
pub fn write_trace(path: &Path, trace: &[f64]) -> Result<(), CliError> {
    let mut out = String::with_capacity(trace.len() * 20);
    for loss in trace {
        out.push_str(&format!("{loss:.17e}\n"));
    }
    write_text(path, &out)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut file = std::fs::File::create(path).map_err(|e| CliError::Path {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    file.write_all(text.as_bytes()).map_err(|e| CliError::Path {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Dropout-head decisions against ground truth, tagged with the protected
/// group, ready for the fairness metrics.
pub fn fd_outcomes(
    model: &mut RetentionModel,
    prepared: &Prepared,
) -> Result<Vec<BinaryOutcome>, CliError> {
    let outputs = predict(model, &prepared.samples, EVAL_BATCH)?;
    Ok(outputs
        .iter()
        .zip(&prepared.labels)
        .zip(&prepared.privileged)
        .map(|((o, l), &p)| BinaryOutcome {
            predicted: decide(o).dropout,
            actual: l.dropout,
            privileged: p,
        })
        .collect())
}

pub fn fd_accuracy(outcomes: &[BinaryOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    let hits = outcomes
        .iter()
        .filter(|o| o.predicted == o.actual)
        .count();
    hits as f64 / outcomes.len() as f64
}

/// Machine-readable audit output; `version` guards downstream parsers.
#[derive(Debug, Serialize)]
pub struct AuditReport {
    pub version: u32,
    pub protected: String,
    pub mitigation: String,
    pub before: FairnessReport,
    pub fd_accuracy_before: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub after: Option<FairnessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_accuracy_after: Option<f64>,
    /// FD accuracy after minus before; present whenever a mitigation ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_delta: Option<f64>,
}

pub fn format_fairness(report: &FairnessReport) -> String {
    let signed = |v: Option<f64>| match v {
        Some(v) => format!("{v:+.4}"),
        None => "undefined".to_string(),
    };
    let ratio = |v: Option<f64>| match v {
        Some(v) => format!("{v:.4}"),
        None => "undefined".to_string(),
    };
    format!(
        "  statistical parity difference  {}\n  equal opportunity difference   {}\n  average odds difference        {}\n  disparate impact               {}\n",
        signed(report.statistical_parity_difference),
        signed(report.equal_opportunity_difference),
        signed(report.average_odds_difference),
        ratio(report.disparate_impact),
    )
}
