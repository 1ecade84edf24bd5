//! Prediction and metric reporting for the five tasks.
//!
//! Classification accuracy is computed only over samples where the task is
//! defined: type-of-dropout and timing follow the masking table, duration
//! is scored on masked-in dropouts via root-mean-squared deviation, and the
//! cause task is scored over every dropout with a recorded cause (both
//! dropout types), which is wider than its training mask. A task with no
//! defined samples is reported as absent rather than zero.

use crate::cascade::{derive_mask, Cause, CascadeError, TaskLabels, TaskOutputs, CAUSE_COUNT};
use crate::encoders::SampleInput;
use crate::graph::{Graph, Mode};
use crate::model::{ModelError, RetentionModel};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Note-count bucket edges: 0, 1-2, 3-5, 6-8, 9+.
pub const NOTE_BUCKETS: [(usize, usize); 5] = [(0, 0), (1, 2), (3, 5), (6, 8), (9, usize::MAX)];

/// Batch size used when scoring datasets.
pub const EVAL_BATCH: usize = 64;

/// Count and hit-rate for one classification task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub defined: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl TaskMetric {
    fn from_counts(correct: usize, defined: usize) -> Option<Self> {
        (defined > 0).then(|| TaskMetric {
            defined,
            correct,
            accuracy: correct as f64 / defined as f64,
        })
    }
}

/// Count and deviation for the duration regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetric {
    pub defined: usize,
    pub rmsd: f64,
}

/// Accuracy over the dropouts labeled with one specific cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseAccuracy {
    pub cause_index: usize,
    pub cause: String,
    pub defined: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Per-task accuracy over one note-count bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteBucketRow {
    pub bucket_low: usize,
    pub bucket_high: usize,
    pub samples: usize,
    pub dropout: Option<TaskMetric>,
    pub kind: Option<TaskMetric>,
    pub next_semester: Option<TaskMetric>,
    pub cause: Option<TaskMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub dropout: Option<TaskMetric>,
    pub kind: Option<TaskMetric>,
    pub next_semester: Option<TaskMetric>,
    pub duration: Option<RegressionMetric>,
    pub cause: Option<TaskMetric>,
    pub per_cause: Vec<CauseAccuracy>,
    pub note_buckets: Vec<NoteBucketRow>,
}

/// Hard class decisions from one sample's probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decisions {
    pub dropout: bool,
    pub temporary: bool,
    pub next_semester: bool,
    pub duration: f64,
    pub cause_index: usize,
}

pub fn decide(outputs: &TaskOutputs) -> Decisions {
    let argmax = |p: &[f64]| {
        p.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("probabilities are finite"))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    Decisions {
        dropout: outputs.prob_dropout[1] > outputs.prob_dropout[0],
        temporary: outputs.prob_kind[1] > outputs.prob_kind[0],
        next_semester: outputs.prob_next[1] > outputs.prob_next[0],
        duration: outputs.duration,
        cause_index: argmax(&outputs.prob_cause),
    }
}

/// Scores the model over a dataset in inference mode, in fixed-size batches.
pub fn predict(
    model: &mut RetentionModel,
    samples: &[SampleInput],
    batch_size: usize,
) -> Result<Vec<TaskOutputs>, ModelError> {
    let batch = batch_size.max(1);
    let mut outputs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch) {
        let refs: Vec<&SampleInput> = chunk.iter().collect();
        let mut g = Graph::new();
        let nodes = model.forward_batch(&mut g, &refs, Mode::Infer, 0)?;
        for n in &nodes {
            outputs.push(TaskOutputs::from_graph(&g, n));
        }
    }
    Ok(outputs)
}

struct Tally {
    correct: usize,
    defined: usize,
}

impl Tally {
    fn new() -> Self {
        Tally {
            correct: 0,
            defined: 0,
        }
    }

    fn add(&mut self, hit: bool) {
        self.defined += 1;
        if hit {
            self.correct += 1;
        }
    }

    fn metric(&self) -> Option<TaskMetric> {
        TaskMetric::from_counts(self.correct, self.defined)
    }
}

/// Builds the full report from per-sample outputs, labels, and note counts.
pub fn evaluate(
    outputs: &[TaskOutputs],
    labels: &[TaskLabels],
    note_counts: &[usize],
    mask_rule_3: bool,
) -> Result<EvalReport, CascadeError> {
    assert_eq!(outputs.len(), labels.len(), "outputs and labels must align");
    assert_eq!(outputs.len(), note_counts.len(), "note counts must align");

    let mut fd = Tally::new();
    let mut td = Tally::new();
    let mut nd = Tally::new();
    let mut cd = Tally::new();
    let mut sq_err_sum = 0.0;
    let mut dd_defined = 0usize;
    let mut cause_tallies: Vec<Tally> = (0..CAUSE_COUNT).map(|_| Tally::new()).collect();
    let mut buckets: Vec<[Tally; 4]> = NOTE_BUCKETS
        .iter()
        .map(|_| [Tally::new(), Tally::new(), Tally::new(), Tally::new()])
        .collect();
    let mut bucket_sizes = [0usize; NOTE_BUCKETS.len()];

    for ((out, lab), &notes) in outputs.iter().zip(labels).zip(note_counts) {
        let mask = derive_mask(lab, mask_rule_3)?;
        let d = decide(out);
        let bucket = NOTE_BUCKETS
            .iter()
            .position(|&(lo, hi)| notes >= lo && notes <= hi)
            .expect("buckets cover all counts");
        bucket_sizes[bucket] += 1;

        let fd_hit = d.dropout == lab.dropout;
        fd.add(fd_hit);
        buckets[bucket][0].add(fd_hit);

        if mask[1] {
            let temporary = lab.kind.ok_or(CascadeError::UndefinedLabel { task: 2 })?
                == crate::cascade::DropoutKind::Temporary;
            let hit = d.temporary == temporary;
            td.add(hit);
            buckets[bucket][1].add(hit);
        }
        if mask[2] {
            let next = lab
                .next_semester
                .ok_or(CascadeError::UndefinedLabel { task: 3 })?;
            let hit = d.next_semester == next;
            nd.add(hit);
            buckets[bucket][2].add(hit);
        }
        if mask[3] {
            let duration = lab
                .duration
                .ok_or(CascadeError::UndefinedLabel { task: 4 })?;
            sq_err_sum += (d.duration - duration) * (d.duration - duration);
            dd_defined += 1;
        }
        // The cause task is reported over every dropout with a known cause,
        // regardless of dropout type.
        if lab.dropout {
            if let Some(cause) = lab.cause {
                let hit = d.cause_index == cause.index();
                cd.add(hit);
                cause_tallies[cause.index()].add(hit);
                buckets[bucket][3].add(hit);
            }
        }
    }

    let per_cause = cause_tallies
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            t.metric().map(|m| CauseAccuracy {
                cause_index: i,
                cause: Cause::from_index(i).expect("index in range").label().to_string(),
                defined: m.defined,
                correct: m.correct,
                accuracy: m.accuracy,
            })
        })
        .collect();

    let note_buckets = NOTE_BUCKETS
        .iter()
        .enumerate()
        .map(|(b, &(lo, hi))| NoteBucketRow {
            bucket_low: lo,
            bucket_high: hi,
            samples: bucket_sizes[b],
            dropout: buckets[b][0].metric(),
            kind: buckets[b][1].metric(),
            next_semester: buckets[b][2].metric(),
            cause: buckets[b][3].metric(),
        })
        .collect();

    Ok(EvalReport {
        samples: outputs.len(),
        dropout: fd.metric(),
        kind: td.metric(),
        next_semester: nd.metric(),
        duration: (dd_defined > 0).then(|| RegressionMetric {
            defined: dd_defined,
            rmsd: (sq_err_sum / dd_defined as f64).sqrt(),
        }),
        cause: cd.metric(),
        per_cause,
        note_buckets,
    })
}

impl EvalReport {
    /// Human-readable fixed-width summary table.
    pub fn to_table(&self) -> String {
        fn line(s: &mut String, name: &str, defined: usize, value: Option<f64>) {
            match value {
                Some(v) => {
                    let _ = writeln!(s, "{name:<24}  {defined:>7}  {v:>7.4}");
                }
                None => {
                    let _ = writeln!(s, "{name:<24}  {:>7}  {:>7}", 0, "absent");
                }
            }
        }
        let acc = |m: &Option<TaskMetric>| (m.map_or(0, |m| m.defined), m.map(|m| m.accuracy));
        let mut s = String::new();
        let _ = writeln!(s, "task                      defined   metric");
        let _ = writeln!(s, "------------------------  -------  -------");
        let (d, v) = acc(&self.dropout);
        line(&mut s, "dropout accuracy", d, v);
        let (d, v) = acc(&self.kind);
        line(&mut s, "dropout-type accuracy", d, v);
        let (d, v) = acc(&self.next_semester);
        line(&mut s, "next-semester accuracy", d, v);
        line(
            &mut s,
            "duration rmsd",
            self.duration.map_or(0, |m| m.defined),
            self.duration.map(|m| m.rmsd),
        );
        let (d, v) = acc(&self.cause);
        line(&mut s, "cause accuracy", d, v);
        s
    }

    /// CSV rows: note-count bucket → per-task accuracy (empty cell when the
    /// task has no defined samples in the bucket).
    pub fn note_buckets_csv(&self) -> String {
        let mut s = String::from(
            "bucket_low,bucket_high,samples,dropout_accuracy,kind_accuracy,next_semester_accuracy,cause_accuracy\n",
        );
        for row in &self.note_buckets {
            let cell = |m: &Option<TaskMetric>| {
                m.map(|m| format!("{:.6}", m.accuracy)).unwrap_or_default()
            };
            let high = if row.bucket_high == usize::MAX {
                String::new()
            } else {
                row.bucket_high.to_string()
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                row.bucket_low,
                high,
                row.samples,
                cell(&row.dropout),
                cell(&row.kind),
                cell(&row.next_semester),
                cell(&row.cause),
            );
        }
        s
    }

    /// CSV rows: cause index → accuracy; only causes present in the data.
    pub fn per_cause_csv(&self) -> String {
        let mut s = String::from("cause_index,cause,defined,correct,accuracy\n");
        for row in &self.per_cause {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6}",
                row.cause_index, row.cause, row.defined, row.correct, row.accuracy
            );
        }
        s
    }
}

/// Spearman rank correlation with average ranks for ties. `None` when fewer
/// than two points or either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "inputs must align");
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let rx = ranks(xs);
    let ry = ranks(ys);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mx = mean(&rx);
    let my = mean(&ry);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
