//! Mini-batch SGD training loop with a two-phase learning-rate schedule,
//! conditional task masking, optional per-sample weights, and an optional
//! group-gap penalty on the dropout probability.
//!
//! Every iteration builds one graph over the whole minibatch, sums the
//! masked per-sample losses (scaled by weight over batch size), appends the
//! penalty when configured, and takes one SGD step. The loop is
//! deterministic: shuffles and dropout masks all derive from the config
//! seed.

use crate::cascade::{sample_loss, CascadeError, TaskLabels};
use crate::encoders::SampleInput;
use crate::fairness::{group_gap_penalty, FairnessError};
use crate::graph::{Graph, Mode};
use crate::model::{ModelError, RetentionModel};
use crate::tensor::TensorError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The reference schedule: 16k iterations at 1e-3, then 5k at 1e-4.
pub const BASE_SCHEDULE: [(usize, f64); 2] = [(16_000, 1e-3), (5_000, 1e-4)];
/// Default divisor applied to the reference schedule for desk-scale runs.
pub const DEFAULT_SCHEDULE_SCALE: f64 = 50.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("{what}: got {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("training configuration invalid: {0}")]
    BadConfig(String),
    #[error("loss became non-finite ({loss}) at iteration {iteration}; lower the learning rate or check the data")]
    Diverged { iteration: usize, loss: f64 },
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Engine(#[from] TensorError),
}

/// One constant-rate segment of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub iterations: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phases: Vec<LrPhase>,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Strength of the group-gap penalty; zero disables it.
    pub group_gap_eta: f64,
    /// Global-norm gradient clip; `None` leaves gradients untouched. The
    /// squared-error duration head can produce early gradients orders of
    /// magnitude above the cross-entropy terms, and clipping keeps a hot
    /// learning rate from turning that imbalance into a runaway.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phases: scaled_schedule(DEFAULT_SCHEDULE_SCALE),
            batch_size: 32,
            momentum: 0.0,
            seed: 7,
            group_gap_eta: 0.0,
            grad_clip: None,
        }
    }
}

/// The reference schedule with iteration counts divided by `scale`
/// (rounded up, so no phase silently vanishes).
pub fn scaled_schedule(scale: f64) -> Vec<LrPhase> {
    BASE_SCHEDULE
        .iter()
        .map(|&(iters, lr)| LrPhase {
            iterations: ((iters as f64 / scale).ceil() as usize).max(1),
            learning_rate: lr,
        })
        .collect()
}

/// Per-iteration mean batch loss, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<f64>,
}

pub fn train(
    model: &mut RetentionModel,
    samples: &[SampleInput],
    labels: &[TaskLabels],
    weights: Option<&[f64]>,
    privileged: Option<&[bool]>,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let n = samples.len();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if labels.len() != n {
        return Err(TrainError::LengthMismatch {
            what: "label count",
            got: labels.len(),
            expected: n,
        });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(TrainError::LengthMismatch {
                what: "weight count",
                got: w.len(),
                expected: n,
            });
        }
    }
    if let Some(p) = privileged {
        if p.len() != n {
            return Err(TrainError::LengthMismatch {
                what: "group flag count",
                got: p.len(),
                expected: n,
            });
        }
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::BadConfig("batch size must be positive".into()));
    }
    let rule3 = model.config.mask_rule_3;
    let batch = cfg.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    let mut trace = Vec::new();
    let mut iteration = 0usize;

    for phase in &cfg.phases {
        for _ in 0..phase.iterations {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch_idx = &order[cursor..cursor + batch];
            cursor += batch;
            let dropout_seed: u64 = rng.gen();

            let mut g = Graph::new();
            let batch_samples: Vec<&SampleInput> =
                batch_idx.iter().map(|&i| &samples[i]).collect();
            let outputs =
                model.forward_batch(&mut g, &batch_samples, Mode::Train, dropout_seed)?;

            let mut total = None;
            for (slot, &i) in batch_idx.iter().enumerate() {
                let loss = sample_loss(&mut g, &outputs[slot], &labels[i], rule3)?;
                let w = weights.map_or(1.0, |w| w[i]);
                let term = g.scale(loss, w / batch as f64);
                total = Some(match total {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            let mut total = total.expect("batch is non-empty");

            if cfg.group_gap_eta != 0.0 {
                if let Some(groups) = privileged {
                    let probs: Vec<_> = outputs
                        .iter()
                        .map(|o| g.pick(o.prob_dropout, 1))
                        .collect::<Result<_, _>>()?;
                    let batch_groups: Vec<bool> =
                        batch_idx.iter().map(|&i| groups[i]).collect();
                    if let Some(penalty) =
                        group_gap_penalty(&mut g, &probs, &batch_groups, cfg.group_gap_eta)?
                    {
                        total = g.add(total, penalty)?;
                    }
                }
            }

            let loss_value = g.scalar_value(total);
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    iteration,
                    loss: loss_value,
                });
            }
            model.store.zero_grads();
            g.backward(total, &mut model.store)?;
            if let Some(max_norm) = cfg.grad_clip {
                let norm = model.store.grad_norm();
                if norm > max_norm {
                    model.store.scale_grads(max_norm / norm);
                }
            }
            model.store.sgd_step(phase.learning_rate, cfg.momentum)?;
            trace.push(loss_value);
            iteration += 1;
        }
    }
    Ok(TrainReport { trace })
}
