use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::SeedRng;

/// Deterministic shuffled split into train/valid/test by `fractions`.
/// The valid and test sizes are rounded; train takes the remainder.
pub fn split_dataset<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Invalid(format!("split fractions must lie in [0, 1], got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions must sum to 1, got {total}")));
    }
    let n = items.len();
    let n_valid = (n as f64 * fractions[1]).round() as usize;
    let n_test = ((n as f64 * fractions[2]).round() as usize).min(n - n_valid);
    let n_train = n - n_valid - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedRng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..n_train + n_valid]), pick(&order[n_train + n_valid..])))
}
