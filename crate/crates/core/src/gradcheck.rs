//! Finite-difference verification of analytic gradients.
//!
//! The checker treats the model as a black box: a `build` closure constructs
//! a fresh graph from a [`ParamStore`] and returns its scalar loss node. The
//! analytic gradient comes from one backward pass; the reference gradient
//! from central differences, re-running `build` on a perturbed copy of the
//! store. Copies keep side effects (batch-norm running statistics) from
//! leaking between evaluations, so the closure must be deterministic: any
//! dropout inside must use fixed seeds.

use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step. With f64 losses this balances truncation against
/// cancellation for the scales this model produces.
pub const DEFAULT_STEP: f64 = 1e-4;
/// Both gradients below this magnitude are treated as matching zeros.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of parameter elements compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat element index of the worst comparison.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Relative error with a guarded denominator: tiny pairs compare as equal,
/// and the scale is the larger of the two magnitudes.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < ABS_FLOOR {
        return 0.0;
    }
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients against central differences for every element
/// of `params` (or a random sample of `sample_per_param` elements when set,
/// seeded by `sample_seed`).
///
/// `build` must construct the loss from scratch on the store it is given.
pub fn check_gradients(
    store: &ParamStore,
    params: &[ParamId],
    step: f64,
    sample_per_param: Option<usize>,
    sample_seed: u64,
    mut build: impl FnMut(&mut ParamStore) -> Result<(Graph, NodeId), TensorError>,
) -> Result<GradCheckReport, TensorError> {
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let (mut graph, loss) = build(&mut analytic_store)?;
    graph.backward(loss, &mut analytic_store)?;

    let mut sampler = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &pid in params {
        let n = store.values(pid).len();
        let indices: Vec<usize> = match sample_per_param {
            Some(k) if k < n => {
                let mut picked: Vec<usize> = (0..k).map(|_| sampler.gen_range(0..n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let numeric = {
                let mut plus = store.clone();
                plus.values_mut(pid)[idx] += step;
                let (g, l) = build(&mut plus)?;
                let f_plus = g.scalar_value(l);
                let mut minus = store.clone();
                minus.values_mut(pid)[idx] -= step;
                let (g, l) = build(&mut minus)?;
                let f_minus = g.scalar_value(l);
                (f_plus - f_minus) / (2.0 * step)
            };
            let analytic = analytic_store.grad(pid)[idx];
            let err = rel_err(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(pid).to_string(), idx));
            }
        }
    }
    Ok(report)
}
