//! Stratified train/validation/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Split fractions. The defaults are the exact fractions that produce
/// 12,157 / 3,219 / 5,896 out of 21,272 samples (0.5715 / 0.1513 / 0.2772
/// to four digits).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 12157.0 / 21272.0,
            val: 3219.0 / 21272.0,
            test: 5896.0 / 21272.0,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(DataError::Split(format!("ratios must be positive, got {r:?}")));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Split(format!("ratios must sum to 1, got {r:?}")));
        }
        Ok(())
    }
}

/// Distributes `total` among classes in proportion to `quotas` (which sum
/// to about `total`): floors first, then one extra each to the largest
/// remainders, ties to the lower class id.
fn apportion(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let assigned: usize = out.iter().sum();
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[k] += 1;
    }
    out
}

/// Train, validation and test indices.
pub type SplitIndices = (Vec<usize>, Vec<usize>, Vec<usize>);

/// Splits sample indices by label into `(train, val, test)`.
///
/// The validation and test totals are `round(ratio * N)`; train takes the
/// remainder. Each total is apportioned across classes by largest remainder,
/// so every class is within one sample of its exact share. Within a class,
/// samples are shuffled by `spec.seed` before assignment; each output list
/// is sorted.
pub fn split(labels: &[usize], classes: usize, spec: &SplitSpec) -> Result<SplitIndices, DataError> {
    spec.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or(DataError::Label { label: l, classes })?
            .push(i);
    }
    if let Some(k) = by_class.iter().position(|c| c.len() < 3) {
        return Err(DataError::Split(format!(
            "class {k} has {} samples; at least 3 are needed",
            by_class[k].len()
        )));
    }
    let n = labels.len() as f64;
    let sizes: Vec<f64> = by_class.iter().map(|c| c.len() as f64).collect();
    let val = apportion(
        &sizes.iter().map(|s| s * spec.val).collect::<Vec<_>>(),
        (n * spec.val).round() as usize,
    );
    let test = apportion(
        &sizes.iter().map(|s| s * spec.test).collect::<Vec<_>>(),
        (n * spec.test).round() as usize,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (k, mut idx) in by_class.into_iter().enumerate() {
        if val[k] + test[k] >= idx.len() {
            return Err(DataError::Split(format!(
                "class {k} is too small for the requested ratios"
            )));
        }
        idx.shuffle(&mut rng);
        va.extend_from_slice(&idx[..val[k]]);
        te.extend_from_slice(&idx[val[k]..val[k] + test[k]]);
        tr.extend_from_slice(&idx[val[k] + test[k]..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    te.sort_unstable();
    Ok((tr, va, te))
}
