//! Student record schema, validation, and model-input encoding.
//!
//! A [`StudentRecord`] carries the raw categorical profile, the
//! per-semester performance rows, the counseling notes, and the task
//! labels. Everything entering training passes [`StudentRecord::validate`]
//! first; [`encode_record`] turns a valid record into model inputs.

mod generate;
mod io;
mod smote;
mod split;

pub use generate::generate_cohort;
pub use io::{read_dataset, read_dataset_from, write_dataset, write_dataset_to};
pub use smote::{smote_rebalance, SmoteOutcome, SyntheticLineage};
pub use split::{holdout_split, stratified_kfold, FoldSplit};

use crate::cascade::{Cause, DropoutKind, TaskLabels};
use crate::embed::{EmbedError, NoteEmbedder};
use crate::encoders::{
    EncoderError, NoteSequence, PerformanceSequence, SampleInput, StaticInput, PERF_WIDTH,
    STATIC_INPUT_LEN,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Version written into every serialized record.
pub const SCHEMA_VERSION: u32 = 1;
/// Slack allowed between a duration label and the observed semester count.
pub const DURATION_HORIZON: f64 = 4.0;
/// Longest study history the generator produces, in semesters.
pub const MAX_SEMESTERS: usize = 12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("record {id:?}: {message}")]
    Invalid { id: String, message: String },
    #[error("cohort spec invalid: {0}")]
    BadSpec(String),
    #[error(
        "minority class has {minority} records but interpolation needs at least {required} \
         (neighbor count + 1)"
    )]
    MinorityTooSmall { minority: usize, required: usize },
    #[error("split parameters invalid: {0}")]
    BadSplit(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

/// Why a counseling visit happened (structured note metadata).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteReason {
    Academic,
    Financial,
    Personal,
    Attendance,
    Administrative,
    Wellness,
}

/// One counseling note: structured metadata plus free text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteDocument {
    pub id: String,
    /// 1-based semester the visit happened in.
    pub semester: u32,
    pub reason: NoteReason,
    /// Cause identified during the session, when any was recorded.
    pub outcome: Option<Cause>,
    pub text: String,
}

/// The raw categorical profile; each field is an index into its category
/// list. One-hot encoding all 17 fields yields the 120-wide static input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticProfile {
    pub gender: Gender,
    pub age_bracket: u8,
    pub religion: u8,
    pub major: u8,
    pub transfer_status: u8,
    pub blood_group: u8,
    pub birth_region: u8,
    pub permanent_region: u8,
    pub current_region: u8,
    pub secondary_grade: u8,
    pub higher_secondary_grade: u8,
    pub marital_status: u8,
    pub finance_source: u8,
    pub enrollment_type: u8,
    pub guardian: u8,
    pub income_bracket: u8,
    pub admission_year: u8,
}

impl StaticProfile {
    /// Field names and category counts, in encoding order. The counts sum
    /// to the static input width.
    pub const FIELDS: [(&'static str, usize); 17] = [
        ("gender", 2),
        ("age_bracket", 6),
        ("religion", 5),
        ("major", 15),
        ("transfer_status", 5),
        ("blood_group", 8),
        ("birth_region", 12),
        ("permanent_region", 12),
        ("current_region", 12),
        ("secondary_grade", 7),
        ("higher_secondary_grade", 7),
        ("marital_status", 4),
        ("finance_source", 6),
        ("enrollment_type", 2),
        ("guardian", 2),
        ("income_bracket", 10),
        ("admission_year", 5),
    ];

    fn indices(&self) -> [usize; 17] {
        [
            match self.gender {
                Gender::Male => 0,
                Gender::Female => 1,
            },
            self.age_bracket as usize,
            self.religion as usize,
            self.major as usize,
            self.transfer_status as usize,
            self.blood_group as usize,
            self.birth_region as usize,
            self.permanent_region as usize,
            self.current_region as usize,
            self.secondary_grade as usize,
            self.higher_secondary_grade as usize,
            self.marital_status as usize,
            self.finance_source as usize,
            self.enrollment_type as usize,
            self.guardian as usize,
            self.income_bracket as usize,
            self.admission_year as usize,
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        for ((name, cardinality), index) in Self::FIELDS.iter().zip(self.indices()) {
            if index >= *cardinality {
                return Err(format!(
                    "{name} index {index} out of range (must be < {cardinality})"
                ));
            }
        }
        Ok(())
    }

    /// One-hot encodes all fields into the fixed 120-wide vector.
    pub fn encode_onehot(&self) -> StaticInput {
        let mut v = vec![0.0; STATIC_INPUT_LEN];
        let mut offset = 0;
        for ((_, cardinality), index) in Self::FIELDS.iter().zip(self.indices()) {
            v[offset + index] = 1.0;
            offset += cardinality;
        }
        StaticInput::new(v).expect("field cardinalities sum to the input width")
    }
}

/// Names of the 20 per-semester performance variables, in row order.
pub const PERFORMANCE_FEATURES: [&str; 20] = [
    "credits_new",
    "credits_retaken",
    "credits_passed",
    "credits_failed",
    "attendance_rate",
    "gpa_semester_start",
    "gpa_semester_avg",
    "gpa_semester_end",
    "exams_missed_total",
    "exams_missed_semester",
    "counseling_sessions",
    "payment_due",
    "payment_overdue_count",
    "study_hours_weekly",
    "registration_blocked",
    "blocks_total",
    "scholarship_active",
    "accommodation_on_campus",
    "scholarship_amount_total",
    "scholarship_amount_avg",
];

/// Row indices of features other modules reference by meaning.
pub const GPA_AVG_IDX: usize = 6;
pub const ATTENDANCE_IDX: usize = 4;
pub const PAYMENT_DUE_IDX: usize = 11;
pub const BLOCKED_IDX: usize = 14;
pub const COUNSELING_IDX: usize = 10;

/// One student: profile, history, notes, labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub schema_version: u32,
    pub id: String,
    pub profile: StaticProfile,
    /// Per-semester rows, chronological, each [`PERF_WIDTH`] wide.
    pub performance: Vec<Vec<f64>>,
    pub notes: Vec<NoteDocument>,
    pub labels: TaskLabels,
    /// Set on interpolated records; they never enter test folds.
    #[serde(default)]
    pub synthetic: bool,
}

impl StudentRecord {
    pub fn semesters(&self) -> usize {
        self.performance.len()
    }

    pub fn note_count(&self) -> usize {
        self.notes.len()
    }

    pub fn gender(&self) -> Gender {
        self.profile.gender
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |message: String| {
            Err(DataError::Invalid {
                id: self.id.clone(),
                message,
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if let Err(m) = self.profile.validate() {
            return fail(m);
        }
        if self.performance.is_empty() {
            return fail("no performance rows".into());
        }
        for (i, row) in self.performance.iter().enumerate() {
            if row.len() != PERF_WIDTH {
                return fail(format!(
                    "performance row {i} has {} values, expected {PERF_WIDTH}",
                    row.len()
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return fail(format!("performance row {i} has a non-finite value"));
            }
        }
        let t = self.performance.len() as u32;
        let mut last_semester = 0u32;
        for note in &self.notes {
            if note.semester < 1 || note.semester > t {
                return fail(format!(
                    "note {:?} semester {} outside observed range 1..={t}",
                    note.id, note.semester
                ));
            }
            if note.semester < last_semester {
                return fail(format!("note {:?} breaks chronological order", note.id));
            }
            last_semester = note.semester;
        }
        // Later task labels are defined exactly when the student dropped
        // out; retained students carry none of them.
        let l = &self.labels;
        if l.dropout {
            if l.kind.is_none() {
                return fail("dropout record is missing the dropout type".into());
            }
            if l.next_semester.is_none() {
                return fail("dropout record is missing the timing flag".into());
            }
            if l.cause.is_none() {
                return fail("dropout record is missing the cause".into());
            }
            match l.duration {
                None => return fail("dropout record is missing the duration".into()),
                Some(d) => {
                    if !(0.0..=(t as f64 + DURATION_HORIZON)).contains(&d) {
                        return fail(format!(
                            "duration {d} outside 0..={} (semesters present plus horizon)",
                            t as f64 + DURATION_HORIZON
                        ));
                    }
                }
            }
        } else if l.kind.is_some()
            || l.next_semester.is_some()
            || l.duration.is_some()
            || l.cause.is_some()
        {
            return fail("retained record carries dropout-only labels".into());
        }
        Ok(())
    }
}

/// Parameters for the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_students: usize,
    /// Overall dropout probability.
    pub dropout_rate: f64,
    /// Share of dropouts that are temporary (vs permanent).
    pub temporary_share: f64,
    pub male_share: f64,
    /// Higher values shrink feature noise around the planted signals.
    pub signal_strength: f64,
    /// Extra dropout probability given to female students, balanced so the
    /// overall rate stays `dropout_rate`; zero means no injected bias.
    #[serde(default)]
    pub gender_dropout_gap: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_students: 1000,
            dropout_rate: 0.14,
            temporary_share: 0.74,
            male_share: 0.76,
            signal_strength: 4.0,
            gender_dropout_gap: 0.0,
            seed: 7,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let prob = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                Err(DataError::BadSpec(format!("{name} {v} outside [0, 1]")))
            } else {
                Ok(())
            }
        };
        prob("dropout_rate", self.dropout_rate)?;
        prob("temporary_share", self.temporary_share)?;
        prob("male_share", self.male_share)?;
        if self.signal_strength < 0.0 || !self.signal_strength.is_finite() {
            return Err(DataError::BadSpec(format!(
                "signal_strength {} must be a finite nonnegative value",
                self.signal_strength
            )));
        }
        prob("female dropout rate", self.female_dropout_rate())?;
        prob("male dropout rate", self.male_dropout_rate())?;
        Ok(())
    }

    /// Gendered rates; they average back to `dropout_rate` under
    /// `male_share`.
    pub fn female_dropout_rate(&self) -> f64 {
        self.dropout_rate + self.gender_dropout_gap * self.male_share
    }

    pub fn male_dropout_rate(&self) -> f64 {
        self.dropout_rate - self.gender_dropout_gap * (1.0 - self.male_share)
    }
}

/// Marginal counts over a dataset, for generation summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub students: usize,
    pub dropouts: usize,
    pub temporary: usize,
    pub permanent: usize,
    pub male: usize,
    pub female: usize,
    pub synthetic: usize,
    pub total_notes: usize,
}

impl CohortSummary {
    pub fn from_records(records: &[StudentRecord]) -> Self {
        let mut s = CohortSummary {
            students: records.len(),
            dropouts: 0,
            temporary: 0,
            permanent: 0,
            male: 0,
            female: 0,
            synthetic: 0,
            total_notes: 0,
        };
        for r in records {
            if r.labels.dropout {
                s.dropouts += 1;
                match r.labels.kind {
                    Some(DropoutKind::Temporary) => s.temporary += 1,
                    Some(DropoutKind::Permanent) => s.permanent += 1,
                    None => {}
                }
            }
            match r.gender() {
                Gender::Male => s.male += 1,
                Gender::Female => s.female += 1,
            }
            if r.synthetic {
                s.synthetic += 1;
            }
            s.total_notes += r.notes.len();
        }
        s
    }
}

impl fmt::Display for CohortSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |part: usize, whole: usize| {
            if whole == 0 {
                0.0
            } else {
                100.0 * part as f64 / whole as f64
            }
        };
        writeln!(f, "students            {:>8}", self.students)?;
        writeln!(
            f,
            "dropouts            {:>8} ({:.0}%)",
            self.dropouts,
            pct(self.dropouts, self.students)
        )?;
        writeln!(
            f,
            "  temporary         {:>8} ({:.0}%)",
            self.temporary,
            pct(self.temporary, self.dropouts)
        )?;
        writeln!(
            f,
            "  permanent         {:>8} ({:.0}%)",
            self.permanent,
            pct(self.permanent, self.dropouts)
        )?;
        writeln!(
            f,
            "male                {:>8} ({:.0}%)",
            self.male,
            pct(self.male, self.students)
        )?;
        writeln!(
            f,
            "female              {:>8} ({:.0}%)",
            self.female,
            pct(self.female, self.students)
        )?;
        writeln!(f, "synthetic           {:>8}", self.synthetic)?;
        writeln!(f, "counseling notes    {:>8}", self.total_notes)
    }
}

/// Turns a validated record into model inputs, embedding each note.
pub fn encode_record(
    record: &StudentRecord,
    embedder: &NoteEmbedder,
) -> Result<SampleInput, DataError> {
    let static_input = record.profile.encode_onehot();
    let performance = PerformanceSequence::new(record.performance.clone())?;
    let mut vectors = Vec::with_capacity(record.notes.len());
    for note in &record.notes {
        vectors.push(embedder.embed(&note.id, &note.text)?);
    }
    let notes = NoteSequence::new(embedder.dim(), vectors)?;
    Ok(SampleInput {
        static_input,
        performance,
        notes,
    })
}

/// Encodes a whole dataset, in order.
pub fn encode_records(
    records: &[StudentRecord],
    embedder: &NoteEmbedder,
) -> Result<Vec<SampleInput>, DataError> {
    records.iter().map(|r| encode_record(r, embedder)).collect()
}
