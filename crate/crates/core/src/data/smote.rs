//! Minority oversampling by interpolation between nearest minority
//! neighbors.
//!
//! Distances and blends live in a zero-padded numeric space: the 120-bit
//! demographic encoding concatenated with every performance row, padded
//! with zero rows up to the longest minority history. Interpolation runs
//! per coordinate at one shared uniform lambda, so each synthetic point
//! sits exactly on the (base, neighbor) segment there. The synthetic
//! record keeps the base's semester count, profile, notes, and labels;
//! only the numeric rows are blended.

use super::{DataError, StudentRecord};
use crate::encoders::PERF_WIDTH;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Provenance of one interpolated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLineage {
    pub synthetic_id: String,
    pub base_id: String,
    pub neighbor_id: String,
    pub lambda: f64,
}

/// Augmented dataset plus the provenance of every synthetic record.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoteOutcome {
    pub records: Vec<StudentRecord>,
    pub lineage: Vec<SyntheticLineage>,
}

/// Numeric embedding used for neighbor search: one-hot demographics plus
/// performance rows zero-padded to `t_max` semesters.
fn padded_features(record: &StudentRecord, t_max: usize) -> Vec<f64> {
    let onehot = record.profile.encode_onehot();
    let mut v = Vec::with_capacity(onehot.values().len() + t_max * PERF_WIDTH);
    v.extend_from_slice(onehot.values());
    for row in &record.performance {
        v.extend_from_slice(row);
    }
    v.resize(v.len() + (t_max - record.semesters()) * PERF_WIDTH, 0.0);
    v
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Oversamples the dropout class until its size reaches
/// `floor(target_ratio * majority)`. Returns the original records followed
/// by the synthetics, each flagged and traced in the lineage.
pub fn smote_rebalance(
    records: &[StudentRecord],
    k: usize,
    target_ratio: f64,
    seed: u64,
) -> Result<SmoteOutcome, DataError> {
    if k == 0 {
        return Err(DataError::BadSpec("neighbor count k must be positive".into()));
    }
    if !(target_ratio.is_finite() && target_ratio > 0.0) {
        return Err(DataError::BadSpec(format!(
            "target_ratio {target_ratio} must be a positive finite value"
        )));
    }
    let minority: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].labels.dropout)
        .collect();
    let majority_len = records.len() - minority.len();
    let target = (target_ratio * majority_len as f64).floor() as usize;
    let needed = target.saturating_sub(minority.len());
    if needed == 0 {
        return Ok(SmoteOutcome {
            records: records.to_vec(),
            lineage: Vec::new(),
        });
    }
    if minority.len() < k + 1 {
        return Err(DataError::MinorityTooSmall {
            minority: minority.len(),
            required: k + 1,
        });
    }

    let t_max = minority
        .iter()
        .map(|&i| records[i].semesters())
        .max()
        .expect("minority is non-empty");
    let features: Vec<Vec<f64>> = minority
        .iter()
        .map(|&i| padded_features(&records[i], t_max))
        .collect();

    // k nearest minority neighbors per minority member, ties broken by
    // position so the result is order-stable.
    let neighbors: Vec<Vec<usize>> = (0..minority.len())
        .map(|a| {
            let mut order: Vec<usize> = (0..minority.len()).filter(|&b| b != a).collect();
            order.sort_by(|&x, &y| {
                let dx = squared_distance(&features[a], &features[x]);
                let dy = squared_distance(&features[a], &features[y]);
                dx.partial_cmp(&dy).expect("finite distances").then(x.cmp(&y))
            });
            order.truncate(k);
            order
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    let mut lineage = Vec::with_capacity(needed);
    let mut per_base_counter = vec![0usize; minority.len()];
    for s in 0..needed {
        let base_pos = s % minority.len();
        let neighbor_pos = neighbors[base_pos][rng.gen_range(0..k)];
        let lambda: f64 = rng.gen();
        let base = &records[minority[base_pos]];
        let neighbor = &records[minority[neighbor_pos]];

        let mut synthetic = base.clone();
        per_base_counter[base_pos] += 1;
        synthetic.id = format!("synth-{}-{}", base.id, per_base_counter[base_pos]);
        synthetic.synthetic = true;
        for (t, row) in synthetic.performance.iter_mut().enumerate() {
            for (j, value) in row.iter_mut().enumerate() {
                let n = neighbor
                    .performance
                    .get(t)
                    .map(|r| r[j])
                    .unwrap_or(0.0);
                *value += lambda * (n - *value);
            }
        }
        synthetic.validate()?;
        lineage.push(SyntheticLineage {
            synthetic_id: synthetic.id.clone(),
            base_id: base.id.clone(),
            neighbor_id: neighbor.id.clone(),
            lambda,
        });
        out.push(synthetic);
    }
    Ok(SmoteOutcome {
        records: out,
        lineage,
    })
}
