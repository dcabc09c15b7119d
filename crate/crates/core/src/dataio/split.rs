use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schema::class_counts;
use crate::error::{Error, Result};

fn by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        out[y].push(i);
    }
    out
}

/// Stratified split into `(train, test)` index lists, both sorted.
///
/// Each class contributes `round(n_c · fraction)` rows to the test side,
/// clamped so both sides keep at least one row of every class.
pub fn split_train_test(
    labels: &[usize],
    classes: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in by_class(labels, classes).into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} sample(s); stratified split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Subsamples every class to the minority-class count, without replacement.
///
/// Returns sorted indices; classes with no rows are ignored.
pub fn downsample_balance(labels: &[usize], classes: usize, seed: u64) -> Result<Vec<usize>> {
    let counts = class_counts(labels, classes);
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let Some(&min) = present.iter().min() else {
        return Err(Error::InsufficientData("no rows to balance".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(min * present.len());
    for idx in by_class(labels, classes) {
        if idx.len() == min {
            keep.extend(idx);
        } else if !idx.is_empty() {
            keep.extend(idx.choose_multiple(&mut rng, min).copied());
        }
    }
    keep.sort_unstable();
    Ok(keep)
}
