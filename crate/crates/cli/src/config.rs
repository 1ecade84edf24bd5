//! Run configuration: one TOML file drives every subcommand.
//!
//! Every section has defaults, so an empty file is a valid smoke setup.
//! Command-line flags override individual keys after the file is parsed;
//! referenced paths (a precomputed embedding table) must exist at load.

use crate::CliError;
use retention_core::data::CohortSpec;
use retention_core::embed::{NoteEmbedder, PrecomputedTable};
use retention_core::model::ModelConfig;
use retention_core::train::{scaled_schedule, LrPhase, TrainConfig, DEFAULT_SCHEDULE_SCALE};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; cohort generation, splitting, rebalancing, parameter
    /// initialization, and training order all derive from it.
    pub seed: u64,
    /// Note vectorization: "hashing" or "precomputed:<path>".
    pub embedder: String,
    pub cohort: CohortSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub split: SplitSection,
    pub smote: SmoteSection,
    pub fairness: FairnessSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            embedder: "hashing".to_string(),
            cohort: CohortSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            split: SplitSection::default(),
            smote: SmoteSection::default(),
            fairness: FairnessSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Path {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| {
            CliError::Config(format!("{}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.cohort
            .to_spec(self.seed)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.model
            .to_model_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.schedule.scale <= 0.0 || !self.schedule.scale.is_finite() {
            return Err(CliError::Config(format!(
                "schedule.scale {} must be positive",
                self.schedule.scale
            )));
        }
        if self.schedule.batch_size == 0 {
            return Err(CliError::Config("schedule.batch_size must be positive".into()));
        }
        if let Some(clip) = self.schedule.grad_clip {
            if !(clip > 0.0 && clip.is_finite()) {
                return Err(CliError::Config(format!(
                    "schedule.grad_clip {clip} must be positive"
                )));
            }
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "split.test_fraction {} must lie in (0, 1)",
                self.split.test_fraction
            )));
        }
        if self.split.k < 2 {
            return Err(CliError::Config(format!(
                "split.k {} must be at least 2",
                self.split.k
            )));
        }
        if self.smote.k == 0 {
            return Err(CliError::Config("smote.k must be positive".into()));
        }
        if !(self.smote.target_ratio > 0.0 && self.smote.target_ratio.is_finite()) {
            return Err(CliError::Config(format!(
                "smote.target_ratio {} must be positive",
                self.smote.target_ratio
            )));
        }
        if self.fairness.protected != "gender" {
            return Err(CliError::Config(format!(
                "unknown protected attribute {:?} (only \"gender\" is recorded)",
                self.fairness.protected
            )));
        }
        if self.fairness.mitigation == Mitigation::Regularizer && self.fairness.eta <= 0.0 {
            return Err(CliError::Config(format!(
                "fairness.eta {} must be positive for the regularizer",
                self.fairness.eta
            )));
        }
        // Referenced paths must exist at load time, not at first use.
        if let Some(path) = self.embedder.strip_prefix("precomputed:") {
            if !Path::new(path).is_file() {
                return Err(CliError::Path {
                    path: path.to_string(),
                    message: "embedding table not found".to_string(),
                });
            }
        } else if self.embedder != "hashing" {
            return Err(CliError::Config(format!(
                "embedder {:?} is not \"hashing\" or \"precomputed:<path>\"",
                self.embedder
            )));
        }
        Ok(())
    }

    pub fn build_embedder(&self) -> Result<NoteEmbedder, CliError> {
        if let Some(path) = self.embedder.strip_prefix("precomputed:") {
            let table = PrecomputedTable::load(Path::new(path)).map_err(|e| CliError::Path {
                path: path.to_string(),
                message: e.to_string(),
            })?;
            return Ok(NoteEmbedder::Precomputed(table));
        }
        NoteEmbedder::hashing(self.model.note_embed_dim, HASH_EMBED_SEED)
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

/// The hashing embedder's seed is fixed, not tied to the run seed: a note
/// must map to the same vector at training and scoring time even when the
/// two runs use different seeds, or checkpoints would only be scorable by
/// the exact run that wrote them.
pub const HASH_EMBED_SEED: u64 = 0x6e6f_7465;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub n_students: usize,
    pub dropout_rate: f64,
    pub temporary_share: f64,
    pub male_share: f64,
    pub signal_strength: f64,
    pub gender_dropout_gap: f64,
}

impl Default for CohortSection {
    fn default() -> Self {
        let spec = CohortSpec::default();
        CohortSection {
            n_students: spec.n_students,
            dropout_rate: spec.dropout_rate,
            temporary_share: spec.temporary_share,
            male_share: spec.male_share,
            signal_strength: spec.signal_strength,
            gender_dropout_gap: spec.gender_dropout_gap,
        }
    }
}

impl CohortSection {
    pub fn to_spec(&self, seed: u64) -> CohortSpec {
        CohortSpec {
            n_students: self.n_students,
            dropout_rate: self.dropout_rate,
            temporary_share: self.temporary_share,
            male_share: self.male_share,
            signal_strength: self.signal_strength,
            gender_dropout_gap: self.gender_dropout_gap,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub note_embed_dim: usize,
    pub note_hidden: usize,
    pub head_hidden: usize,
    pub dropout_rate: f64,
    pub use_static: bool,
    pub use_temporal: bool,
    pub use_notes: bool,
    pub mask_rule_3: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let config = ModelConfig::default();
        ModelSection {
            note_embed_dim: config.note_embed_dim,
            note_hidden: config.note_hidden,
            head_hidden: config.head_hidden,
            dropout_rate: config.dropout_rate,
            use_static: config.use_static,
            use_temporal: config.use_temporal,
            use_notes: config.use_notes,
            mask_rule_3: config.mask_rule_3,
        }
    }
}

impl ModelSection {
    /// Mirrors a checkpoint's stored configuration, so a retrain builds the
    /// identical architecture.
    pub fn from_model_config(config: &ModelConfig) -> Self {
        ModelSection {
            note_embed_dim: config.note_embed_dim,
            note_hidden: config.note_hidden,
            head_hidden: config.head_hidden,
            dropout_rate: config.dropout_rate,
            use_static: config.use_static,
            use_temporal: config.use_temporal,
            use_notes: config.use_notes,
            mask_rule_3: config.mask_rule_3,
        }
    }

    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            note_embed_dim: self.note_embed_dim,
            note_hidden: self.note_hidden,
            head_hidden: self.head_hidden,
            dropout_rate: self.dropout_rate,
            use_static: self.use_static,
            use_temporal: self.use_temporal,
            use_notes: self.use_notes,
            mask_rule_3: self.mask_rule_3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// Divides the reference schedule (16k iterations at 1e-3, then 5k at
    /// 1e-4); the default 50 gives a 320 + 100 desk-scale run.
    pub scale: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Global-norm gradient clip; omit to train unclipped.
    pub grad_clip: Option<f64>,
    /// Explicit phases; set to bypass the scaled reference schedule.
    pub phases: Option<Vec<PhaseSection>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            scale: DEFAULT_SCHEDULE_SCALE,
            batch_size: 32,
            momentum: 0.0,
            grad_clip: None,
            phases: None,
        }
    }
}

impl ScheduleSection {
    pub fn phases(&self) -> Vec<LrPhase> {
        match &self.phases {
            Some(explicit) => explicit
                .iter()
                .map(|p| LrPhase {
                    iterations: p.iterations,
                    learning_rate: p.learning_rate,
                })
                .collect(),
            None => scaled_schedule(self.scale),
        }
    }

    pub fn to_train_config(&self, seed: u64, group_gap_eta: f64) -> TrainConfig {
        TrainConfig {
            phases: self.phases(),
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed,
            group_gap_eta,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Kfold,
    Holdout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub mode: SplitMode,
    /// Fold count in k-fold mode.
    pub k: usize,
    /// Held-out share in holdout mode.
    pub test_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            mode: SplitMode::Holdout,
            k: 10,
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoteSection {
    pub enabled: bool,
    pub k: usize,
    pub target_ratio: f64,
}

impl Default for SmoteSection {
    fn default() -> Self {
        SmoteSection {
            enabled: false,
            k: 5,
            target_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mitigation {
    None,
    Reweigh,
    Regularizer,
}

impl std::str::FromStr for Mitigation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Mitigation::None),
            "reweigh" => Ok(Mitigation::Reweigh),
            "regularizer" => Ok(Mitigation::Regularizer),
            other => Err(format!(
                "unknown mitigation {other:?} (expected none, reweigh, or regularizer)"
            )),
        }
    }
}

impl std::fmt::Display for Mitigation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mitigation::None => "none",
            Mitigation::Reweigh => "reweigh",
            Mitigation::Regularizer => "regularizer",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessSection {
    /// Protected attribute name; only "gender" is recorded on students.
    pub protected: String,
    pub mitigation: Mitigation,
    /// Group-gap penalty weight when the regularizer is selected.
    pub eta: f64,
}

impl Default for FairnessSection {
    fn default() -> Self {
        FairnessSection {
            protected: "gender".to_string(),
            mitigation: Mitigation::None,
            eta: 1.0,
        }
    }
}
