//! Synthetic cohort generator with planted, learnable structure.
//!
//! Labels are drawn first (dropout, type, timing, duration, cause), then
//! features are generated conditional on them:
//!
//! * Dropout trajectories deteriorate toward the final semester (grades,
//!   attendance, missed exams), with cause-specific twists such as rising
//!   payment balances for finance-driven dropouts.
//! * Background profiles skew with the departure story (income and funding
//!   for financial exits, prior grades for academic struggle, guardianship
//!   for family reasons, admission year for the pandemic causes), so every
//!   modality carries usable cause evidence, not just the notes.
//! * `signal_strength` controls both the noise floor of the structured
//!   trajectories and how reliably the planted evidence appears: at zero the
//!   base rates apply, and rising strength pushes them toward certainty.
//! * A `muted_share` fraction of dropouts keeps a healthy-looking
//!   structured trajectory; for them only the counseling notes carry the
//!   dropout evidence. This is what makes notes genuinely informative over
//!   the structured views.
//! * Note counts follow one distribution for everyone, so the number of
//!   notes never leaks the label; only note content does.
//!
//! Everything is drawn from per-student streams, so records are identical
//! for a given (seed, index) regardless of generation order.

use super::{
    CohortSpec, DataError, Gender, NoteDocument, NoteReason, StaticProfile, StudentRecord,
    ATTENDANCE_IDX, BLOCKED_IDX, COUNSELING_IDX, GPA_AVG_IDX, MAX_SEMESTERS, PAYMENT_DUE_IDX,
    SCHEMA_VERSION,
};
use crate::cascade::{Cause, DropoutKind, TaskLabels, CAUSE_COUNT};
use crate::encoders::PERF_WIDTH;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

/// Fraction of dropouts whose structured features look healthy; their risk
/// shows only in the notes.
pub const MUTED_SHARE: f64 = 0.25;

/// Base chance that any given note written about an eventual dropout
/// references the cause; the rest read like ordinary progress notes.
const THEMED_NOTE_P: f64 = 0.75;

/// Base chance that a themed note also mentions how the departure looks
/// (temporary or final) and, when known, the return plan.
const KIND_PHRASE_P: f64 = 0.85;

/// Base chance that a themed note's visit record carries the cause as its
/// registered outcome.
const OUTCOME_FLAG_P: f64 = 0.8;

/// Planted-evidence probabilities approach certainty as the signal grows;
/// at strength zero the base rate applies unchanged.
fn sharpen(base: f64, signal_strength: f64) -> f64 {
    1.0 - (1.0 - base) / (1.0 + 0.25 * signal_strength)
}

/// Mean grade trajectory anchors.
const RETAINED_GPA: f64 = 3.2;
const DROPOUT_FINAL_GPA: f64 = 1.9;
const STRUGGLE_FINAL_GPA: f64 = 1.5;

/// Cause frequencies, aligned with [`Cause::ALL`]. They sum to 1.
const CAUSE_WEIGHTS: [f64; CAUSE_COUNT] = [
    0.22,  // financial
    0.11,  // family
    0.07,  // marriage
    0.06,  // physically_ill
    0.05,  // family_death
    0.10,  // personal
    0.005, // own_death
    0.01,  // accident
    0.14,  // academic_struggle
    0.03,  // covid_family_death
    0.08,  // covid_financial
    0.05,  // covid_online_class
    0.03,  // internship
    0.005, // traveling
    0.04,  // mentally_ill
];

/// Distinctive note text per cause; tokens here are the learnable signal.
const CAUSE_NOTES: [&str; CAUSE_COUNT] = [
    "tuition balance overdue, discussed installment plan and emergency loan options",
    "family obligations at home, caring for younger siblings and relatives",
    "recently married, relocating to join spouse in another city",
    "ongoing medical treatment, repeated hospital admissions this term",
    "bereavement after losing a parent, extended grieving absence",
    "private personal circumstances, requested confidential handling",
    "enrollment record closed by administration following student death notice",
    "recovering from road accident injuries, mobility limited",
    "failing multiple courses, core coursework far above current preparation",
    "lost a close family member to the covid outbreak, family in quarantine",
    "household income collapsed during covid lockdown, breadwinner unemployed",
    "cannot manage online classes, unreliable village internet connectivity",
    "accepted a full time industry internship placement, pausing studies",
    "extended travel abroad planned for family business",
    "severe anxiety and depression, referred to counseling therapy program",
];

/// Visit reason recorded alongside each cause-themed note.
const CAUSE_REASONS: [NoteReason; CAUSE_COUNT] = [
    NoteReason::Financial,
    NoteReason::Personal,
    NoteReason::Personal,
    NoteReason::Wellness,
    NoteReason::Personal,
    NoteReason::Personal,
    NoteReason::Administrative,
    NoteReason::Wellness,
    NoteReason::Academic,
    NoteReason::Personal,
    NoteReason::Financial,
    NoteReason::Academic,
    NoteReason::Administrative,
    NoteReason::Administrative,
    NoteReason::Wellness,
];

const PROGRESS_NOTES: [&str; 5] = [
    "routine advising session, degree progress on track",
    "course selection discussion for upcoming registration window",
    "reviewed semester plan, no outstanding concerns",
    "career guidance meeting, exploring elective pathways",
    "checked in after midterms, results satisfactory",
];

const MILD_CONCERN_NOTES: [&str; 3] = [
    "slight dip in quiz scores, workload manageable with adjusted schedule",
    "asked about tutoring resources, proactive about staying ahead",
    "short-term attendance slip during club season, already recovered",
];

const TEMPORARY_PHRASES: [&str; 2] = [
    "requesting a leave of absence with intent to re-enroll",
    "plans to return after taking a break",
];

const PERMANENT_PHRASES: [&str; 2] = [
    "submitted final withdrawal papers, not returning",
    "closing enrollment permanently, transcript requested",
];

const NEXT_SEMESTER_PHRASES: [&str; 2] = [
    "expects to stop enrollment as early as next semester",
    "registration for the coming semester will not be completed",
];

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair; decorrelates per-student streams.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return mean;
    }
    Normal::new(mean, sd).expect("sd is positive").sample(rng)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).expect("lambda is positive").sample(rng)
}

fn bern(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

struct Draft {
    gender: Gender,
    labels: TaskLabels,
    semesters: usize,
    muted: bool,
}

fn draw_labels(rng: &mut ChaCha8Rng, spec: &CohortSpec) -> Draft {
    let gender = if bern(rng, spec.male_share) {
        Gender::Male
    } else {
        Gender::Female
    };
    let rate = match gender {
        Gender::Male => spec.male_dropout_rate(),
        Gender::Female => spec.female_dropout_rate(),
    };
    let dropout = bern(rng, rate);
    let semesters = rng.gen_range(1..=MAX_SEMESTERS);
    if !dropout {
        return Draft {
            gender,
            labels: TaskLabels::retained(),
            semesters,
            muted: false,
        };
    }
    let kind = if bern(rng, spec.temporary_share) {
        DropoutKind::Temporary
    } else {
        DropoutKind::Permanent
    };
    let cause = Cause::from_index(pick_weighted(rng, &CAUSE_WEIGHTS)).expect("weight per cause");
    let next_semester = match kind {
        DropoutKind::Temporary => bern(rng, 0.55),
        DropoutKind::Permanent => bern(rng, 0.5),
    };
    Draft {
        gender,
        labels: TaskLabels {
            dropout: true,
            kind: Some(kind),
            next_semester: Some(next_semester),
            duration: Some(semesters as f64),
            cause: Some(cause),
        },
        semesters,
        muted: bern(rng, MUTED_SHARE),
    }
}

fn draw_profile(
    rng: &mut ChaCha8Rng,
    gender: Gender,
    labels: &TaskLabels,
    signal_strength: f64,
) -> StaticProfile {
    let s = |base: f64| sharpen(base, signal_strength);
    let cause = labels.cause;
    let financial = matches!(cause, Some(Cause::Financial | Cause::PandemicFinancial));
    let struggling = matches!(cause, Some(Cause::AcademicStruggle));
    let married = matches!(cause, Some(Cause::Marriage)) && bern(rng, s(0.9));
    // Background attributes skew with the departure story: family-driven exits
    // cluster in relative-guardian households, the pandemic causes sit in the
    // pandemic admission years, connectivity hardship concentrates in outlying
    // regions, interns tend to hold strong prior grades, and long travel
    // tracks family wealth.
    let family_tie = matches!(
        cause,
        Some(Cause::Family | Cause::FamilyDeath | Cause::PandemicFamilyDeath)
    );
    let pandemic_era = matches!(
        cause,
        Some(
            Cause::PandemicFamilyDeath
                | Cause::PandemicFinancial
                | Cause::PandemicOnlineHardship
        )
    );
    let connectivity = matches!(cause, Some(Cause::PandemicOnlineHardship));
    let interning = matches!(cause, Some(Cause::Internship));
    let travelling = matches!(cause, Some(Cause::Traveling));

    let marital_status = if married {
        1
    } else {
        pick_weighted(rng, &[0.82, 0.10, 0.05, 0.03]) as u8
    };
    let income_bracket = if financial && bern(rng, s(0.8)) {
        rng.gen_range(0..3) as u8
    } else if travelling && bern(rng, s(0.75)) {
        7 + rng.gen_range(0..3) as u8
    } else {
        pick_weighted(rng, &[0.05, 0.07, 0.10, 0.13, 0.15, 0.15, 0.13, 0.10, 0.07, 0.05]) as u8
    };
    let grades = |rng: &mut ChaCha8Rng, s: &dyn Fn(f64) -> f64| {
        if struggling && bern(rng, s(0.75)) {
            rng.gen_range(0..3) as u8
        } else {
            pick_weighted(rng, &[0.03, 0.05, 0.10, 0.17, 0.25, 0.25, 0.15]) as u8
        }
    };
    let secondary_grade = grades(rng, &s);
    let higher_secondary_grade = if interning && bern(rng, s(0.7)) {
        5 + rng.gen_range(0..2) as u8
    } else {
        grades(rng, &s)
    };
    let finance_source = if financial && bern(rng, s(0.7)) {
        // loan or self-funded
        2 + rng.gen_range(0..2) as u8
    } else {
        pick_weighted(rng, &[0.45, 0.20, 0.10, 0.10, 0.10, 0.05]) as u8
    };
    let current_region = if connectivity && bern(rng, s(0.75)) {
        9 + rng.gen_range(0..3) as u8
    } else {
        rng.gen_range(0..12) as u8
    };
    StaticProfile {
        gender,
        age_bracket: pick_weighted(rng, &[0.10, 0.35, 0.30, 0.15, 0.07, 0.03]) as u8,
        religion: pick_weighted(rng, &[0.55, 0.25, 0.10, 0.06, 0.04]) as u8,
        major: rng.gen_range(0..15) as u8,
        transfer_status: pick_weighted(rng, &[0.80, 0.08, 0.05, 0.04, 0.03]) as u8,
        blood_group: rng.gen_range(0..8) as u8,
        birth_region: rng.gen_range(0..12) as u8,
        permanent_region: rng.gen_range(0..12) as u8,
        current_region,
        secondary_grade,
        higher_secondary_grade,
        marital_status,
        finance_source,
        enrollment_type: pick_weighted(rng, &[0.9, 0.1]) as u8,
        guardian: if family_tie && bern(rng, s(0.7)) {
            1
        } else {
            pick_weighted(rng, &[0.85, 0.15]) as u8
        },
        income_bracket,
        admission_year: if pandemic_era && bern(rng, s(0.85)) {
            3 + rng.gen_range(0..2) as u8
        } else {
            rng.gen_range(0..5) as u8
        },
    }
}

/// Draws the note count for any student; independent of the label so note
/// volume alone carries no signal.
fn draw_note_count(rng: &mut ChaCha8Rng) -> usize {
    if bern(rng, 0.15) {
        return 0;
    }
    (1 + poisson(rng, 3.0) as usize).min(MAX_SEMESTERS)
}

fn make_notes(
    rng: &mut ChaCha8Rng,
    student_id: &str,
    draft: &Draft,
    signal_strength: f64,
) -> Vec<NoteDocument> {
    let themed_p = sharpen(THEMED_NOTE_P, signal_strength);
    let kind_p = sharpen(KIND_PHRASE_P, signal_strength);
    let outcome_p = sharpen(OUTCOME_FLAG_P, signal_strength);
    let count = draw_note_count(rng);
    let mut semesters: Vec<u32> = (0..count)
        .map(|_| rng.gen_range(1..=draft.semesters as u32))
        .collect();
    semesters.sort_unstable();
    let mut notes = Vec::with_capacity(count);
    for (k, &semester) in semesters.iter().enumerate() {
        let (text, reason, outcome) = if draft.labels.dropout && bern(rng, themed_p) {
            let cause = draft.labels.cause.expect("dropouts carry a cause");
            let mut text = CAUSE_NOTES[cause.index()].to_string();
            match draft.labels.kind.expect("dropouts carry a type") {
                DropoutKind::Temporary => {
                    if bern(rng, kind_p) {
                        text.push_str("; ");
                        text.push_str(TEMPORARY_PHRASES[rng.gen_range(0..TEMPORARY_PHRASES.len())]);
                    }
                    if draft.labels.next_semester == Some(true) && bern(rng, kind_p) {
                        text.push_str("; ");
                        text.push_str(
                            NEXT_SEMESTER_PHRASES[rng.gen_range(0..NEXT_SEMESTER_PHRASES.len())],
                        );
                    }
                }
                DropoutKind::Permanent => {
                    if bern(rng, kind_p) {
                        text.push_str("; ");
                        text.push_str(PERMANENT_PHRASES[rng.gen_range(0..PERMANENT_PHRASES.len())]);
                    }
                }
            }
            let outcome = bern(rng, outcome_p).then_some(cause);
            (text, CAUSE_REASONS[cause.index()], outcome)
        } else if bern(rng, 0.15) {
            let text = MILD_CONCERN_NOTES[rng.gen_range(0..MILD_CONCERN_NOTES.len())].to_string();
            (text, NoteReason::Academic, None)
        } else {
            let text = PROGRESS_NOTES[rng.gen_range(0..PROGRESS_NOTES.len())].to_string();
            let reason = if bern(rng, 0.3) {
                NoteReason::Administrative
            } else {
                NoteReason::Academic
            };
            (text, reason, None)
        };
        notes.push(NoteDocument {
            id: format!("{student_id}-n{}", k + 1),
            semester,
            reason,
            outcome,
            text,
        });
    }
    notes
}

fn make_performance(
    rng: &mut ChaCha8Rng,
    draft: &Draft,
    notes: &[NoteDocument],
    signal_strength: f64,
) -> Vec<Vec<f64>> {
    let sigma = 0.5 / (1.0 + signal_strength);
    let t_total = draft.semesters;
    // A muted dropout's structured trajectory is drawn like a retained one.
    let deteriorate = draft.labels.dropout && !draft.muted;
    let cause = draft.labels.cause;
    let financial = matches!(cause, Some(Cause::Financial | Cause::PandemicFinancial));
    let struggling = matches!(cause, Some(Cause::AcademicStruggle));
    let unwell = matches!(
        cause,
        Some(Cause::PhysicallyIll | Cause::MentallyIll | Cause::Accident)
    );
    let final_gpa = if struggling {
        STRUGGLE_FINAL_GPA
    } else {
        DROPOUT_FINAL_GPA
    };
    let final_attendance = match draft.labels.kind {
        Some(DropoutKind::Permanent) => 0.35,
        Some(DropoutKind::Temporary) => 0.55,
        None => 0.88,
    } - if unwell { 0.10 } else { 0.0 };

    let scholarship = !(deteriorate && financial) && bern(rng, 0.3);
    let accommodation = bern(rng, 0.4);
    let scholarship_per_term = 1200.0;

    let mut rows = Vec::with_capacity(t_total);
    let mut exams_missed_total = 0.0;
    let mut overdue_total = 0.0;
    let mut blocks_total = 0.0;
    let mut scholarship_total = 0.0;
    for t in 1..=t_total {
        // Deterioration ramps linearly toward the final observed semester.
        let ramp = if deteriorate && t_total > 0 {
            t as f64 / t_total as f64
        } else {
            0.0
        };
        let gpa_mid = RETAINED_GPA - ramp * (RETAINED_GPA - final_gpa);
        let gpa_start = clamp(normal(rng, gpa_mid + 0.05, sigma), 0.0, 4.0);
        let gpa_avg = clamp(normal(rng, gpa_mid, sigma), 0.0, 4.0);
        let gpa_end = clamp(normal(rng, gpa_mid - 0.05, sigma), 0.0, 4.0);
        let attendance = clamp(
            normal(rng, 0.88 - ramp * (0.88 - final_attendance), 0.04 + sigma * 0.05),
            0.0,
            1.0,
        );
        let credits_new = clamp(normal(rng, 15.0, 2.0), 6.0, 24.0).round();
        let credits_failed = poisson(rng, 0.2 + 1.2 * ramp);
        let credits_retaken = poisson(rng, 0.3 + 0.8 * ramp);
        let credits_passed = (credits_new - credits_failed).max(0.0);
        // Health-driven departures miss noticeably more exams on the way out.
        let missed_rate = if unwell { 2.8 } else { 1.5 };
        let exams_missed = poisson(rng, 0.2 + missed_rate * ramp);
        exams_missed_total += exams_missed;
        let counseling = notes.iter().filter(|n| n.semester == t as u32).count() as f64;
        let payment_due = if deteriorate && financial {
            clamp(normal(rng, 200.0 + 1800.0 * ramp, 150.0), 0.0, 5000.0)
        } else {
            clamp(normal(rng, 200.0, 120.0), 0.0, 5000.0)
        };
        let overdue = if deteriorate && financial {
            poisson(rng, 0.1 + 1.0 * ramp)
        } else {
            poisson(rng, 0.1)
        };
        overdue_total += overdue;
        let study_hours = clamp(normal(rng, 25.0 - 12.0 * ramp, 4.0), 0.0, 60.0);
        let blocked = if t == t_total && deteriorate {
            // Timing evidence: an imminent dropout usually ends blocked.
            let p = if draft.labels.next_semester == Some(true) {
                0.8
            } else {
                0.15
            };
            bern(rng, p)
        } else {
            bern(rng, 0.04)
        };
        if blocked {
            blocks_total += 1.0;
        }
        if scholarship {
            scholarship_total += scholarship_per_term;
        }

        let mut row = vec![0.0; PERF_WIDTH];
        row[0] = credits_new;
        row[1] = credits_retaken;
        row[2] = credits_passed;
        row[3] = credits_failed;
        row[ATTENDANCE_IDX] = attendance;
        row[5] = gpa_start;
        row[GPA_AVG_IDX] = gpa_avg;
        row[7] = gpa_end;
        row[8] = exams_missed_total;
        row[9] = exams_missed;
        row[COUNSELING_IDX] = counseling;
        row[PAYMENT_DUE_IDX] = payment_due;
        row[12] = overdue_total;
        row[13] = study_hours;
        row[BLOCKED_IDX] = if blocked { 1.0 } else { 0.0 };
        row[15] = blocks_total;
        row[16] = if scholarship { 1.0 } else { 0.0 };
        row[17] = if accommodation { 1.0 } else { 0.0 };
        row[18] = scholarship_total;
        row[19] = if scholarship { scholarship_per_term } else { 0.0 };
        rows.push(row);
    }
    rows
}

/// Generates `spec.n_students` records; deterministic in the seed.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<StudentRecord>, DataError> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.n_students);
    for i in 0..spec.n_students {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, i as u64));
        let draft = draw_labels(&mut rng, spec);
        let id = format!("s{i:05}");
        let profile = draw_profile(&mut rng, draft.gender, &draft.labels, spec.signal_strength);
        let notes = make_notes(&mut rng, &id, &draft, spec.signal_strength);
        let performance = make_performance(&mut rng, &draft, &notes, spec.signal_strength);
        let record = StudentRecord {
            schema_version: SCHEMA_VERSION,
            id,
            profile,
            performance,
            notes,
            labels: draft.labels,
            synthetic: false,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}
