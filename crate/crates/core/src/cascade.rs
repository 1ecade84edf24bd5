//! Task labels, conditional loss masking, and the five-head cascade.
//!
//! The five tasks over a student's future are ordered from coarse to fine:
//!
//! 1. dropout risk (binary),
//! 2. temporary vs permanent (binary, dropouts only),
//! 3. next-semester timing (binary, dropouts only),
//! 4. duration in semesters (regression, dropouts only),
//! 5. cause (15 classes, dropouts only).
//!
//! Head `k` receives the fused representation concatenated with the hidden
//! vector of head `k-1`, so information flows strictly forward through the
//! cascade. Loss terms for tasks that a record cannot answer (a retained
//! student has no dropout kind) are never built, which makes their gradients
//! exactly zero rather than merely small.

use crate::graph::{Graph, NodeId, CROSS_ENTROPY_EPS};
use crate::layers::{Activation, Dense};
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorError;
use rand::Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const TASK_COUNT: usize = 5;
pub const CAUSE_COUNT: usize = 15;
/// Width of each head's hidden layer.
pub const DEFAULT_HEAD_HIDDEN: usize = 32;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("task {task} is active under the mask but its label is undefined")]
    UndefinedLabel { task: usize },
    #[error("class index {index} out of range for {classes} classes")]
    BadTarget { index: usize, classes: usize },
    #[error(transparent)]
    Engine(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutKind {
    Temporary,
    Permanent,
}

/// Reasons a student leaves, in the fixed reporting order used everywhere a
/// cause appears as an index (serialization, the cause head's classes, CSV
/// breakdowns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cause {
    Financial,
    Family,
    Marriage,
    PhysicallyIll,
    FamilyDeath,
    Personal,
    OwnDeath,
    Accident,
    AcademicStruggle,
    PandemicFamilyDeath,
    PandemicFinancial,
    PandemicOnlineHardship,
    Internship,
    Traveling,
    MentallyIll,
}

impl Cause {
    pub const ALL: [Cause; CAUSE_COUNT] = [
        Cause::Financial,
        Cause::Family,
        Cause::Marriage,
        Cause::PhysicallyIll,
        Cause::FamilyDeath,
        Cause::Personal,
        Cause::OwnDeath,
        Cause::Accident,
        Cause::AcademicStruggle,
        Cause::PandemicFamilyDeath,
        Cause::PandemicFinancial,
        Cause::PandemicOnlineHardship,
        Cause::Internship,
        Cause::Traveling,
        Cause::MentallyIll,
    ];

    pub fn index(self) -> usize {
        Cause::ALL.iter().position(|c| *c == self).unwrap()
    }

    pub fn from_index(index: usize) -> Option<Cause> {
        Cause::ALL.get(index).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Cause::Financial => "financial",
            Cause::Family => "family",
            Cause::Marriage => "marriage",
            Cause::PhysicallyIll => "physically_ill",
            Cause::FamilyDeath => "family_death",
            Cause::Personal => "personal",
            Cause::OwnDeath => "own_death",
            Cause::Accident => "accident",
            Cause::AcademicStruggle => "academic_struggle",
            Cause::PandemicFamilyDeath => "covid_family_death",
            Cause::PandemicFinancial => "covid_financial",
            Cause::PandemicOnlineHardship => "covid_online_class",
            Cause::Internship => "internship",
            Cause::Traveling => "traveling",
            Cause::MentallyIll => "mentally_ill",
        }
    }

    fn valid_listing() -> String {
        Cause::ALL
            .iter()
            .map(|c| format!("{}={}", c.index(), c.label()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Causes serialize as their index so datasets stay compact and ordered.
impl Serialize for Cause {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u64(self.index() as u64)
    }
}

impl<'de> Deserialize<'de> for Cause {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let index = u64::deserialize(deserializer)?;
        Cause::from_index(index as usize).ok_or_else(|| {
            D::Error::custom(format!(
                "cause index {index} out of range; valid causes are {}",
                Cause::valid_listing()
            ))
        })
    }
}

/// Ground truth for the five tasks. Tasks beyond the first are optional
/// because they are meaningless for retained students; [`derive_mask`]
/// decides which of them a training step may read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskLabels {
    pub dropout: bool,
    pub kind: Option<DropoutKind>,
    pub next_semester: Option<bool>,
    pub duration: Option<f64>,
    pub cause: Option<Cause>,
}

impl TaskLabels {
    pub fn retained() -> Self {
        TaskLabels {
            dropout: false,
            kind: None,
            next_semester: None,
            duration: None,
            cause: None,
        }
    }
}

/// Which task losses a record contributes. Index 0 is the dropout task.
pub type TaskMask = [bool; TASK_COUNT];

/// Derives the loss mask from labels:
///
/// * task 1 always contributes;
/// * a retained student answers only task 1;
/// * a permanent dropout answers tasks 1-2 (timing, duration, and cause
///   presuppose a return that never happens in the recorded window);
/// * with `rule3` enabled, a temporary dropout already leaving next semester
///   skips tasks 4-5; by default this case trains everything;
/// * otherwise all five contribute.
pub fn derive_mask(labels: &TaskLabels, rule3: bool) -> Result<TaskMask, CascadeError> {
    if !labels.dropout {
        return Ok([true, false, false, false, false]);
    }
    let kind = labels
        .kind
        .ok_or(CascadeError::UndefinedLabel { task: 2 })?;
    if kind == DropoutKind::Permanent {
        return Ok([true, true, false, false, false]);
    }
    if rule3 {
        let next = labels
            .next_semester
            .ok_or(CascadeError::UndefinedLabel { task: 3 })?;
        if next {
            return Ok([true, true, true, false, false]);
        }
    }
    Ok([true; TASK_COUNT])
}

/// `-ln(p[target])` with the same epsilon clamp the graph op applies.
pub fn cross_entropy_value(p: &[f64], target: usize) -> Result<f64, CascadeError> {
    if target >= p.len() {
        return Err(CascadeError::BadTarget {
            index: target,
            classes: p.len(),
        });
    }
    Ok(-(p[target].max(CROSS_ENTROPY_EPS)).ln())
}

/// Squared error on scalars.
pub fn euclidean_loss_value(y_hat: f64, y: f64) -> f64 {
    (y_hat - y) * (y_hat - y)
}

/// Graph nodes produced by one forward pass of the cascade.
#[derive(Debug, Clone, Copy)]
pub struct TaskOutputNodes {
    pub prob_dropout: NodeId,
    pub prob_kind: NodeId,
    pub prob_next: NodeId,
    pub duration: NodeId,
    pub prob_cause: NodeId,
    pub hidden: [NodeId; TASK_COUNT],
}

/// Plain values read back from [`TaskOutputNodes`] for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskOutputs {
    pub prob_dropout: [f64; 2],
    pub prob_kind: [f64; 2],
    pub prob_next: [f64; 2],
    pub duration: f64,
    pub prob_cause: Vec<f64>,
}

impl TaskOutputs {
    pub fn from_graph(g: &Graph, nodes: &TaskOutputNodes) -> Self {
        let pair = |id: NodeId| -> [f64; 2] {
            let v = g.values(id);
            [v[0], v[1]]
        };
        TaskOutputs {
            prob_dropout: pair(nodes.prob_dropout),
            prob_kind: pair(nodes.prob_kind),
            prob_next: pair(nodes.prob_next),
            duration: g.scalar_value(nodes.duration),
            prob_cause: g.values(nodes.prob_cause).to_vec(),
        }
    }
}

/// The five heads. Each is `dense(hidden, relu)` into a task-specific output
/// layer: softmax pairs for the three binary tasks, one linear unit for
/// duration, a 15-way softmax for cause.
#[derive(Debug, Clone)]
pub struct CascadeHeads {
    hidden_layers: [Dense; TASK_COUNT],
    output_layers: [Dense; TASK_COUNT],
    pub z_dim: usize,
    pub hidden_width: usize,
}

const HEAD_NAMES: [&str; TASK_COUNT] = [
    "head_dropout",
    "head_kind",
    "head_next",
    "head_duration",
    "head_cause",
];
const HEAD_OUT_DIMS: [usize; TASK_COUNT] = [2, 2, 2, 1, CAUSE_COUNT];

impl CascadeHeads {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        z_dim: usize,
        hidden_width: usize,
    ) -> Result<Self, TensorError> {
        let mut hidden_layers = Vec::with_capacity(TASK_COUNT);
        let mut output_layers = Vec::with_capacity(TASK_COUNT);
        for k in 0..TASK_COUNT {
            // Head 1 sees z alone; later heads see z plus the previous hidden.
            let in_dim = if k == 0 { z_dim } else { z_dim + hidden_width };
            hidden_layers.push(Dense::new(
                store,
                rng,
                &format!("{}.hidden", HEAD_NAMES[k]),
                in_dim,
                hidden_width,
                Activation::Relu,
            )?);
            output_layers.push(Dense::new(
                store,
                rng,
                &format!("{}.out", HEAD_NAMES[k]),
                hidden_width,
                HEAD_OUT_DIMS[k],
                Activation::Identity,
            )?);
        }
        Ok(CascadeHeads {
            hidden_layers: hidden_layers.try_into().expect("exactly five heads"),
            output_layers: output_layers.try_into().expect("exactly five heads"),
            z_dim,
            hidden_width,
        })
    }

    /// Parameters belonging to head `k` (0-based) and to no other head.
    pub fn head_param_ids(&self, k: usize) -> Vec<ParamId> {
        vec![
            self.hidden_layers[k].w,
            self.hidden_layers[k].b,
            self.output_layers[k].w,
            self.output_layers[k].b,
        ]
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: NodeId,
    ) -> Result<TaskOutputNodes, TensorError> {
        let mut hidden = [z; TASK_COUNT];
        let mut outputs = [z; TASK_COUNT];
        let mut prev_hidden: Option<NodeId> = None;
        for k in 0..TASK_COUNT {
            let input = match prev_hidden {
                None => z,
                Some(h) => g.concat(&[z, h])?,
            };
            let h = self.hidden_layers[k].forward(g, store, input)?;
            let raw = self.output_layers[k].forward(g, store, h)?;
            outputs[k] = if HEAD_OUT_DIMS[k] == 1 {
                raw
            } else {
                g.softmax(raw)?
            };
            hidden[k] = h;
            prev_hidden = Some(h);
        }
        Ok(TaskOutputNodes {
            prob_dropout: outputs[0],
            prob_kind: outputs[1],
            prob_next: outputs[2],
            duration: outputs[3],
            prob_cause: outputs[4],
            hidden,
        })
    }
}

/// Builds the masked loss for one sample as a graph node:
/// `L = sum_k m_k * L_k`, cross-entropy for the classification heads and
/// squared error for duration. Terms with `m_k = 0` are not built at all.
pub fn sample_loss(
    g: &mut Graph,
    outputs: &TaskOutputNodes,
    labels: &TaskLabels,
    rule3: bool,
) -> Result<NodeId, CascadeError> {
    let mask = derive_mask(labels, rule3)?;
    let mut total = g.cross_entropy(outputs.prob_dropout, labels.dropout as usize)?;
    if mask[1] {
        let kind = labels
            .kind
            .ok_or(CascadeError::UndefinedLabel { task: 2 })?;
        let target = (kind == DropoutKind::Temporary) as usize;
        let term = g.cross_entropy(outputs.prob_kind, target)?;
        total = g.add(total, term)?;
    }
    if mask[2] {
        let next = labels
            .next_semester
            .ok_or(CascadeError::UndefinedLabel { task: 3 })?;
        let term = g.cross_entropy(outputs.prob_next, next as usize)?;
        total = g.add(total, term)?;
    }
    if mask[3] {
        let duration = labels
            .duration
            .ok_or(CascadeError::UndefinedLabel { task: 4 })?;
        let target = g.constant(duration);
        let diff = g.sub(outputs.duration, target)?;
        let term = g.sqr(diff);
        total = g.add(total, term)?;
    }
    if mask[4] {
        let cause = labels
            .cause
            .ok_or(CascadeError::UndefinedLabel { task: 5 })?;
        let term = g.cross_entropy(outputs.prob_cause, cause.index())?;
        total = g.add(total, term)?;
    }
    Ok(total)
}
