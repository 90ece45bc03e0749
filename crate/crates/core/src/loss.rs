//! Softmax and categorical cross-entropy.

use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking the log. NaN
/// passes through so that diverged runs are visible.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels for a batch of {batch}")]
    BatchMismatch { labels: usize, batch: usize },
    #[error("expected (N, K) probabilities")]
    Rank,
}

/// Row-wise softmax over the last axis, with max-subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape().channels();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn rows(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize), LossError> {
    let &[n, k] = probs.dims() else {
        return Err(LossError::Rank);
    };
    if labels.len() != n {
        return Err(LossError::BatchMismatch {
            labels: labels.len(),
            batch: n,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(LossError::LabelOutOfRange { label, classes: k });
    }
    Ok((n, k))
}

/// Mean over the batch of `-ln p[label]`.
pub fn cce_loss(probs: &Tensor, labels: &[usize]) -> Result<f64, LossError> {
    let (n, k) = rows(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let p = probs.data()[i * k + t];
            -(if p < PROB_FLOOR { PROB_FLOOR } else { p }).ln()
        })
        .sum();
    Ok(total / n as f64)
}

/// Gradient of `cce_loss(softmax(z))` with respect to the logits `z`:
/// `(p - onehot) / N`.
pub fn softmax_cce_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor, LossError> {
    let (n, k) = rows(probs, labels)?;
    let mut g = probs.clone();
    for (i, &t) in labels.iter().enumerate() {
        g.data_mut()[i * k + t] -= 1.0;
    }
    for v in g.data_mut() {
        *v /= n as f64;
    }
    Ok(g)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = probs.shape().channels();
    probs
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_vec(shape![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn nan_logits_give_nan_loss() {
        let p = softmax(&row(&[0.0, f64::NAN, 1.0]));
        assert!(cce_loss(&p, &[0]).unwrap().is_nan());
        // a genuine zero probability still hits the floor
        assert_eq!(cce_loss(&row(&[0.0, 1.0]), &[0]).unwrap(), -PROB_FLOOR.ln());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&row(&[0.0, 0.0, 0.0]));
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&row(&[2f64.ln(), 0.0, 0.0]));
        let want = [0.5, 0.25, 0.25];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&row(&[1000.0, 999.0, -1000.0]));
        assert!(p.is_finite());
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cce_examples() {
        assert_eq!(cce_loss(&row(&[0.0, 1.0, 0.0]), &[1]).unwrap(), 0.0);
        let l = cce_loss(&row(&[0.5, 0.25, 0.25]), &[0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = cce_loss(&row(&[1.0 / 3.0; 3]), &[2]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(cce_loss(&row(&[0.0, 1.0]), &[0]).unwrap().is_finite());
        assert!(matches!(
            cce_loss(&row(&[0.5, 0.5]), &[2]),
            Err(LossError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            cce_loss(&row(&[0.5, 0.5]), &[0, 1]),
            Err(LossError::BatchMismatch { .. })
        ));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let z = Tensor::from_vec(shape![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.5]).unwrap();
        let labels = [2, 0];
        let g = softmax_cce_grad(&softmax(&z), &labels).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut plus = z.clone();
            plus.data_mut()[i] += h;
            let mut minus = z.clone();
            minus.data_mut()[i] -= h;
            let fd = (cce_loss(&softmax(&plus), &labels).unwrap() - cce_loss(&softmax(&minus), &labels).unwrap())
                / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8, "{fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor::from_vec(shape![2, 3], vec![0.4, 0.4, 0.2, 0.1, 0.3, 0.3]).unwrap();
        assert_eq!(argmax_rows(&p), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 2..10),
            c in -1e3f64..1e3,
        ) {
            let p = softmax(&row(&v));
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.data().iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&row(&shifted));
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        // When the shift itself adds without rounding, max-subtraction
        // recovers identical differences and the output is bit-identical.
        #[test]
        fn shift_invariance_is_exact_without_rounding(
            v in prop::collection::vec(-1000i32..1000, 2..10),
            c in -100_000i32..100_000,
        ) {
            let x: Vec<f64> = v.iter().map(|&a| a as f64 / 8.0).collect();
            let shifted: Vec<f64> = x.iter().map(|a| a + c as f64).collect();
            prop_assert_eq!(softmax(&row(&x)), softmax(&row(&shifted)));
        }
    }
}
