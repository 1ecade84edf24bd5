//! Stratified dataset splitting.
//!
//! Both splitters shuffle within each class and deal indices out so the
//! dropout share of every fold tracks the full dataset. Results depend only
//! on (labels, k or fraction, seed).

use super::DataError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Index sets for one train/test division.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled_class_indices(labels: &[bool], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positive: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut negative: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    positive.shuffle(&mut rng);
    negative.shuffle(&mut rng);
    (positive, negative)
}

/// Splits `0..labels.len()` into `k` stratified folds; fold `f` is the test
/// set of the `f`-th returned split and every index appears in exactly one
/// test set.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<Vec<FoldSplit>, DataError> {
    if k < 2 {
        return Err(DataError::BadSplit(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    if k > labels.len() {
        return Err(DataError::BadSplit(format!(
            "cannot cut {} samples into {k} folds",
            labels.len()
        )));
    }
    let (positive, negative) = shuffled_class_indices(labels, seed);
    let mut fold_of = vec![0usize; labels.len()];
    for class in [&positive, &negative] {
        for (pos, &idx) in class.iter().enumerate() {
            fold_of[idx] = pos % k;
        }
    }
    let mut splits = Vec::with_capacity(k);
    for f in 0..k {
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
        if test.is_empty() || train.is_empty() {
            return Err(DataError::BadSplit(format!("fold {f} would be empty")));
        }
        splits.push(FoldSplit { train, test });
    }
    Ok(splits)
}

/// Single stratified train/test division holding out roughly
/// `test_fraction` of each class.
pub fn holdout_split(
    labels: &[bool],
    test_fraction: f64,
    seed: u64,
) -> Result<FoldSplit, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::BadSplit(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let (positive, negative) = shuffled_class_indices(labels, seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [&positive, &negative] {
        let take = (class.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&class[..take]);
        train.extend_from_slice(&class[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        return Err(DataError::BadSplit(
            "holdout split left an empty side".to_string(),
        ));
    }
    Ok(FoldSplit { train, test })
}
