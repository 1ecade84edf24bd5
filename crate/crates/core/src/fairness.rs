//! Group-fairness metrics over binary predictions and two mitigations:
//! pre-training sample reweighing and an in-training group-gap regularizer.
//!
//! Metrics compare a privileged and an unprivileged group. Conventions:
//! "positive" means the favorable/flagged prediction or label (here: the
//! dropout flag), and every difference is unprivileged minus privileged, so
//! a negative statistical parity difference means the unprivileged group is
//! flagged less often.

use crate::graph::{Graph, NodeId};
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fair ranges: differences within ±0.1, disparate impact within [0.8, 1.2].
pub const DIFFERENCE_FAIR_RANGE: (f64, f64) = (-0.1, 0.1);
pub const DISPARATE_IMPACT_FAIR_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error("input slices have mismatched lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(
        "no samples with privileged={privileged}, positive={positive}; \
         reweighing needs every group/label cell occupied (regenerate the cohort or merge groups)"
    )]
    EmptyCell { privileged: bool, positive: bool },
    #[error(transparent)]
    Engine(#[from] TensorError),
}

/// One scored sample for fairness accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryOutcome {
    pub predicted: bool,
    pub actual: bool,
    pub privileged: bool,
}

/// Confusion counts for one group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub n: usize,
    pub predicted_positive: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub actual_positive: usize,
    pub actual_negative: usize,
}

impl GroupCounts {
    fn add(&mut self, predicted: bool, actual: bool) {
        self.n += 1;
        if predicted {
            self.predicted_positive += 1;
        }
        if actual {
            self.actual_positive += 1;
            if predicted {
                self.true_positive += 1;
            }
        } else {
            self.actual_negative += 1;
            if predicted {
                self.false_positive += 1;
            }
        }
    }

    fn selection_rate(&self) -> Option<f64> {
        (self.n > 0).then(|| self.predicted_positive as f64 / self.n as f64)
    }

    fn tpr(&self) -> Option<f64> {
        (self.actual_positive > 0).then(|| self.true_positive as f64 / self.actual_positive as f64)
    }

    fn fpr(&self) -> Option<f64> {
        (self.actual_negative > 0).then(|| self.false_positive as f64 / self.actual_negative as f64)
    }
}

/// The four metrics; a metric is `None` when its defining rates do not
/// exist (an empty group, no positives for TPR, a zero privileged selection
/// rate for disparate impact).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub privileged: GroupCounts,
    pub unprivileged: GroupCounts,
    /// Selection-rate difference, unprivileged minus privileged.
    pub statistical_parity_difference: Option<f64>,
    /// True-positive-rate difference.
    pub equal_opportunity_difference: Option<f64>,
    /// Mean of the FPR and TPR differences.
    pub average_odds_difference: Option<f64>,
    /// Selection-rate ratio, unprivileged over privileged.
    pub disparate_impact: Option<f64>,
}

/// Pass/fail against the fair ranges; `None` when the metric is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FairnessFlags {
    pub statistical_parity: Option<bool>,
    pub equal_opportunity: Option<bool>,
    pub average_odds: Option<bool>,
    pub disparate_impact: Option<bool>,
}

impl FairnessReport {
    pub fn flags(&self) -> FairnessFlags {
        let in_range = |v: f64, range: (f64, f64)| v >= range.0 && v <= range.1;
        FairnessFlags {
            statistical_parity: self
                .statistical_parity_difference
                .map(|v| in_range(v, DIFFERENCE_FAIR_RANGE)),
            equal_opportunity: self
                .equal_opportunity_difference
                .map(|v| in_range(v, DIFFERENCE_FAIR_RANGE)),
            average_odds: self
                .average_odds_difference
                .map(|v| in_range(v, DIFFERENCE_FAIR_RANGE)),
            disparate_impact: self
                .disparate_impact
                .map(|v| in_range(v, DISPARATE_IMPACT_FAIR_RANGE)),
        }
    }
}

/// Computes the four group metrics from scored samples.
pub fn compute_metrics(outcomes: &[BinaryOutcome]) -> FairnessReport {
    let mut privileged = GroupCounts::default();
    let mut unprivileged = GroupCounts::default();
    for o in outcomes {
        if o.privileged {
            privileged.add(o.predicted, o.actual);
        } else {
            unprivileged.add(o.predicted, o.actual);
        }
    }
    let sel_p = privileged.selection_rate();
    let sel_u = unprivileged.selection_rate();
    let tpr_p = privileged.tpr();
    let tpr_u = unprivileged.tpr();
    let fpr_p = privileged.fpr();
    let fpr_u = unprivileged.fpr();
    let spd = match (sel_u, sel_p) {
        (Some(u), Some(p)) => Some(u - p),
        _ => None,
    };
    let eod = match (tpr_u, tpr_p) {
        (Some(u), Some(p)) => Some(u - p),
        _ => None,
    };
    let aod = match (fpr_u, fpr_p, tpr_u, tpr_p) {
        (Some(fu), Some(fp), Some(tu), Some(tp)) => Some(0.5 * ((fu - fp) + (tu - tp))),
        _ => None,
    };
    let di = match (sel_u, sel_p) {
        // A privileged group that is never flagged makes the ratio undefined.
        (Some(u), Some(p)) if p > 0.0 => Some(u / p),
        _ => None,
    };
    FairnessReport {
        privileged,
        unprivileged,
        statistical_parity_difference: spd,
        equal_opportunity_difference: eod,
        average_odds_difference: aod,
        disparate_impact: di,
    }
}

/// Per-sample weights that make group membership independent of the label
/// under the weighted empirical distribution: w(s, y) = P(s) P(y) / P(s, y).
pub fn reweigh(privileged: &[bool], positive: &[bool]) -> Result<Vec<f64>, FairnessError> {
    if privileged.len() != positive.len() {
        return Err(FairnessError::LengthMismatch(
            privileged.len(),
            positive.len(),
        ));
    }
    let n = privileged.len() as f64;
    let mut cell = [[0usize; 2]; 2];
    for (&s, &y) in privileged.iter().zip(positive) {
        cell[s as usize][y as usize] += 1;
    }
    for s in [false, true] {
        for y in [false, true] {
            if cell[s as usize][y as usize] == 0 {
                return Err(FairnessError::EmptyCell {
                    privileged: s,
                    positive: y,
                });
            }
        }
    }
    let p_priv = (cell[1][0] + cell[1][1]) as f64 / n;
    let p_pos = (cell[0][1] + cell[1][1]) as f64 / n;
    let p_s = [1.0 - p_priv, p_priv];
    let p_y = [1.0 - p_pos, p_pos];
    let weights = privileged
        .iter()
        .zip(positive)
        .map(|(&s, &y)| {
            let joint = cell[s as usize][y as usize] as f64 / n;
            p_s[s as usize] * p_y[y as usize] / joint
        })
        .collect();
    Ok(weights)
}

/// Squared gap between the groups' mean flagged probability, as a graph node
/// so it can join the training loss: eta · (mean p_unpriv − mean p_priv)².
/// Returns `None` when either group is absent from the batch or eta is zero;
/// the penalty then contributes nothing.
pub fn group_gap_penalty(
    g: &mut Graph,
    flagged_probs: &[NodeId],
    privileged: &[bool],
    eta: f64,
) -> Result<Option<NodeId>, FairnessError> {
    if flagged_probs.len() != privileged.len() {
        return Err(FairnessError::LengthMismatch(
            flagged_probs.len(),
            privileged.len(),
        ));
    }
    if eta == 0.0 {
        return Ok(None);
    }
    let mut groups: [Vec<NodeId>; 2] = [Vec::new(), Vec::new()];
    for (&p, &s) in flagged_probs.iter().zip(privileged) {
        groups[s as usize].push(p);
    }
    if groups[0].is_empty() || groups[1].is_empty() {
        return Ok(None);
    }
    let mean = |g: &mut Graph, nodes: &[NodeId]| -> Result<NodeId, TensorError> {
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = g.add(acc, n)?;
        }
        Ok(g.scale(acc, 1.0 / nodes.len() as f64))
    };
    let mean_u = mean(g, &groups[0])?;
    let mean_p = mean(g, &groups[1])?;
    let gap = g.sub(mean_u, mean_p)?;
    let sq = g.sqr(gap);
    Ok(Some(g.scale(sq, eta)))
}
