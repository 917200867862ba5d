use ndarray::{Array2, ArrayView2};

use super::Real;
use crate::error::{Error, Result};

/// Row-wise log-softmax.
pub fn log_softmax_rows<S: Real>(logits: &ArrayView2<S>) -> Array2<S> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Entropy of the smoothed target distribution over `vocab` classes; a
/// lower bound of the smoothed cross-entropy.
pub fn smoothed_target_entropy(vocab: usize, epsilon: f64) -> f64 {
    let v = vocab as f64;
    let off = epsilon / v;
    let on = 1.0 - epsilon + off;
    let mut h = 0.0;
    if on > 0.0 {
        h -= on * on.ln();
    }
    if off > 0.0 {
        h -= (v - 1.0) * off * off.ln();
    }
    h
}

fn validate(rows: usize, targets: &[u32], mask: &[bool], epsilon: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config("label_smoothing", format!("{epsilon} not in [0, 1)")));
    }
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape("loss targets", rows, format!("{} targets / {} mask", targets.len(), mask.len())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidInput("loss over a fully masked batch".into()));
    }
    Ok(count)
}

/// Mean over unmasked rows of `-sum_k q_k log p_k`, with
/// `q_k = (1 - eps) [k = target] + eps / V`. Zero-weight terms are skipped
/// so a log-probability of `-inf` off-target is allowed when `eps = 0`.
pub fn label_smoothed_ce<S: Real>(logprobs: &ArrayView2<S>, targets: &[u32], mask: &[bool], epsilon: f64) -> Result<f64> {
    let count = validate(logprobs.nrows(), targets, mask, epsilon)?;
    let vocab = logprobs.ncols();
    let off = epsilon / vocab as f64;
    let mut total = 0.0;
    for ((row, &t), &m) in logprobs.rows().into_iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        let mut acc = 0.0;
        for (k, &lp) in row.iter().enumerate() {
            let q = if k == t as usize { 1.0 - epsilon + off } else { off };
            if q > 0.0 {
                acc += q * lp.f64();
            }
        }
        total -= acc;
    }
    Ok(total / count as f64)
}

/// Fused log-softmax + smoothed cross-entropy. Returns the loss and its
/// gradient with respect to the logits (zero on masked rows).
pub fn smoothed_ce_with_logits<S: Real>(
    logits: &ArrayView2<S>,
    targets: &[u32],
    mask: &[bool],
    epsilon: f64,
) -> Result<(f64, Array2<S>)> {
    let count = validate(logits.nrows(), targets, mask, epsilon)?;
    let logprobs = log_softmax_rows(logits);
    let loss = label_smoothed_ce(&logprobs.view(), targets, mask, epsilon)?;
    let vocab = logits.ncols();
    let off = epsilon / vocab as f64;
    let inv = 1.0 / count as f64;
    let mut grad = logprobs.mapv(|lp| lp.exp());
    for ((mut row, &t), &m) in grad.rows_mut().into_iter().zip(targets).zip(mask) {
        if !m {
            row.fill(S::zero());
            continue;
        }
        for (k, g) in row.iter_mut().enumerate() {
            let q = if k == t as usize { 1.0 - epsilon + off } else { off };
            *g = S::lit((g.f64() - q) * inv);
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_input_grad;

    #[test]
    fn uniform_prediction_gives_log_vocab() {
        let lp = Array2::from_elem((3, 4), -(4f64).ln());
        for eps in [0.0, 0.2, 0.5] {
            let l = label_smoothed_ce(&lp.view(), &[0, 1, 3], &[true; 3], eps).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_perfect_prediction() {
        let mut lp = Array2::from_elem((1, 3), f64::NEG_INFINITY);
        lp[[0, 2]] = 0.0;
        assert_eq!(label_smoothed_ce(&lp.view(), &[2], &[true], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn fully_masked_batch_is_an_error() {
        let lp = Array2::<f64>::zeros((2, 4));
        assert!(label_smoothed_ce(&lp.view(), &[0, 0], &[false, false], 0.2).is_err());
        assert!(label_smoothed_ce(&lp.view(), &[0, 0], &[true, true], 1.0).is_err());
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let logits = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 9.0, -9.0, 0.0]).unwrap();
        let (a, g) = smoothed_ce_with_logits(&logits.view(), &[0, 1], &[true, false], 0.1).unwrap();
        let (b, _) = smoothed_ce_with_logits(&logits.slice(ndarray::s![0..1, ..]), &[0], &[true], 0.1).unwrap();
        assert_eq!(a, b);
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let logits = Array2::from_shape_vec((3, 4), vec![0.3, -1.2, 2.0, 0.1, 1.0, 1.0, -0.5, 0.7, -2.0, 0.4, 0.0, 1.1]).unwrap();
        let t = [2, 0, 3];
        let m = [true, true, false];
        let err = check_input_grad(
            &logits,
            1e-6,
            |x| smoothed_ce_with_logits(&x.view(), &t, &m, 0.2).unwrap().0,
            |x| smoothed_ce_with_logits(&x.view(), &t, &m, 0.2).unwrap().1,
        );
        assert!(err < 1e-8, "{err}");
    }
}
