//! Earth mover's distance between score distributions.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// Tolerance on `|Σ p − 1|` for a valid distribution.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Check that every row of a `[.., K]` buffer is a distribution.
pub fn check_distributions(data: &[f64], k: usize, what: &str) -> Result<()> {
    if k == 0 || !data.len().is_multiple_of(k) {
        return Err(Error::Dimension(format!("{what}: {} values do not form rows of {k}", data.len())));
    }
    for (i, row) in data.chunks_exact(k).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= -NORMALIZATION_TOL)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Validation(format!("{what}: row {i} is not a distribution (sum {sum})")));
        }
    }
    Ok(())
}

/// Batch-mean EMD, differentiable in both arguments:
/// `mean_b sqrt(mean_k (CDF_target − CDF_pred)²)`.
///
/// Both inputs are `[B, K]` and must be normalized.
pub fn emd_loss<T: Element>(tape: &mut Tape<T>, target: Var, pred: Var) -> Result<Var> {
    check_distributions(&tape.value(target).to_f64_vec(), tape.shape(target).last().copied().unwrap_or(0), "target")?;
    check_distributions(&tape.value(pred).to_f64_vec(), tape.shape(pred).last().copied().unwrap_or(0), "prediction")?;
    emd_loss_unchecked(tape, target, pred)
}

/// [`emd_loss`] without the normalization check.
pub fn emd_loss_unchecked<T: Element>(tape: &mut Tape<T>, target: Var, pred: Var) -> Result<Var> {
    let ts = tape.shape(target);
    if ts.len() != 2 || ts != tape.shape(pred) {
        return Err(Error::Dimension(format!(
            "emd expects matching [B, K] inputs, got {:?} and {:?}",
            tape.shape(target),
            tape.shape(pred)
        )));
    }
    let ct = tape.cumsum_lastdim(target)?;
    let cp = tape.cumsum_lastdim(pred)?;
    let diff = tape.sub(ct, cp)?;
    let sq = tape.square(diff)?;
    let per_bin = tape.mean_axis(sq, 1)?;
    let per_sample = tape.sqrt(per_bin)?;
    tape.mean_all(per_sample)
}

/// EMD of a single pair of distributions, in f64.
pub fn emd(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "emd: length mismatch");
    let (mut ca, mut cb, mut acc) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ca += x;
        cb += y;
        acc += (ca - cb) * (ca - cb);
    }
    (acc / a.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_hot(k: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        v
    }

    fn loss(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let rows = a.len() / k;
        let ta = tape.constant(Tensor::from_f64(&[rows, k], a).unwrap()).unwrap();
        let tb = tape.param(Tensor::from_f64(&[rows, k], b).unwrap()).unwrap();
        let l = emd_loss(&mut tape, ta, tb)?;
        Ok(tape.value(l).data()[0])
    }

    #[test]
    fn identical_is_zero() {
        let d = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(loss(&d, &d, 4).unwrap(), 0.0);
        assert_eq!(emd(&d, &d), 0.0);
    }

    #[test]
    fn extreme_one_hots() {
        // CDFs differ by 1 on the first nine bins and agree on the last.
        let want = (9.0f64 / 10.0).sqrt();
        let a = one_hot(10, 0);
        let b = one_hot(10, 9);
        assert!((loss(&a, &b, 10).unwrap() - want).abs() < 1e-12);
        assert!((emd(&a, &b) - want).abs() < 1e-12);
    }

    #[test]
    fn batch_mean() {
        let a = [one_hot(3, 0), one_hot(3, 0)].concat();
        let b = [one_hot(3, 0), one_hot(3, 2)].concat();
        let want = 0.5 * (2.0f64 / 3.0).sqrt();
        assert!((loss(&a, &b, 3).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_and_mismatched() {
        assert!(matches!(loss(&[0.5, 0.6], &[0.5, 0.5], 2), Err(Error::Validation(_))));
        assert!(matches!(loss(&[1.2, -0.2], &[0.5, 0.5], 2), Err(Error::Validation(_))));
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(emd_loss_unchecked(&mut tape, a, b), Err(Error::Dimension(_))));
    }
}
