//! Softmax, cross-entropy and KL divergence with logit gradients.

use alloc::vec::Vec;

use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A scalar loss and its gradient with respect to the logits that produced
/// the probabilities.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Matrix,
    /// Number of probabilities that hit [`PROB_FLOOR`] where the target had
    /// mass.
    pub floor_events: usize,
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let cols = out.cols();
    if cols == 0 {
        return out;
    }
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[inline]
fn floored_ln(p: f64, events: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *events += 1;
        libm::log(PROB_FLOOR)
    } else {
        libm::log(p)
    }
}

/// Weighted cross-entropy averaged over rows:
/// `(1/B) sum_i w_i sum_k -t_ik ln p_ik`, gradient `w_i (p_i - t_i) / B`.
///
/// Targets must lie on the simplex. `weights` defaults to all ones.
pub fn cross_entropy(probs: &Matrix, targets: &Matrix, weights: Option<&[f64]>) -> Result<LossOutput> {
    check_dim("cross_entropy rows", probs.rows(), targets.rows())?;
    check_dim("cross_entropy cols", probs.cols(), targets.cols())?;
    if let Some(w) = weights {
        check_dim("cross_entropy weights", probs.rows(), w.len())?;
        if w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "sample weights must be finite and nonnegative".into(),
            ));
        }
    }
    let b = probs.rows();
    if b == 0 {
        return Err(Error::Empty("cross_entropy batch"));
    }
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, probs.cols());
    let mut total = 0.0;
    let mut floor_events = 0;
    for i in 0..b {
        let w = weights.map_or(1.0, |w| w[i]);
        let p = probs.row(i);
        let t = targets.row(i);
        let mut row_loss = 0.0;
        for (&pk, &tk) in p.iter().zip(t) {
            if tk > 0.0 {
                row_loss -= tk * floored_ln(pk, &mut floor_events);
            }
        }
        total += w * row_loss;
        for ((g, &pk), &tk) in grad.row_mut(i).iter_mut().zip(p).zip(t) {
            *g = w * (pk - tk) * inv_b;
        }
    }
    Ok(LossOutput {
        value: total * inv_b,
        grad,
        floor_events,
    })
}

/// Per-row cross-entropy `-sum_k t_k ln p_k` without weighting or averaging.
pub fn cross_entropy_rows(probs: &Matrix, targets: &Matrix) -> Result<Vec<f64>> {
    check_dim("cross_entropy_rows rows", probs.rows(), targets.rows())?;
    check_dim("cross_entropy_rows cols", probs.cols(), targets.cols())?;
    let mut events = 0;
    Ok(probs
        .iter_rows()
        .zip(targets.iter_rows())
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .filter(|(_, &tk)| tk > 0.0)
                .map(|(&pk, &tk)| -tk * floored_ln(pk, &mut events))
                .sum()
        })
        .collect())
}

/// Mean over rows of `KL(p || q) = sum_k p_k ln(p_k / q_k)`.
///
/// `q` holds probabilities produced by a softmax; the returned gradient is
/// with respect to q's logits, `(q - p) / B`. `p` is treated as a constant.
pub fn kl_divergence(p: &Matrix, q: &Matrix) -> Result<LossOutput> {
    check_dim("kl_divergence rows", p.rows(), q.rows())?;
    check_dim("kl_divergence cols", p.cols(), q.cols())?;
    let b = p.rows();
    if b == 0 {
        return Err(Error::Empty("kl_divergence batch"));
    }
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, p.cols());
    let mut total = 0.0;
    let mut floor_events = 0;
    for i in 0..b {
        let pr = p.row(i);
        let qr = q.row(i);
        for (&pk, &qk) in pr.iter().zip(qr) {
            if pk > 0.0 {
                total += pk * (libm::log(pk) - floored_ln(qk, &mut floor_events));
            }
        }
        for ((g, &pk), &qk) in grad.row_mut(i).iter_mut().zip(pr).zip(qr) {
            *g = (qk - pk) * inv_b;
        }
    }
    Ok(LossOutput {
        value: total * inv_b,
        grad,
        floor_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    fn m(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&m(&[[1000.0, -1000.0], [0.3, 0.3]]));
        for r in s.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(s.get(1, 0), 0.5);
    }

    #[test]
    fn cross_entropy_exact_match_is_zero() {
        let p = m(&[[1.0, 0.0], [0.0, 1.0]]);
        let out = cross_entropy(&p, &p, None).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.floor_events, 0);
    }

    #[test]
    fn cross_entropy_half_half_is_ln2() {
        let out = cross_entropy(&m(&[[0.5, 0.5]]), &m(&[[1.0, 0.0]]), None).unwrap();
        assert!((out.value - LN_2).abs() < 1e-15);
        assert_eq!(out.grad.as_slice(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_weights_are_linear() {
        let p = m(&[[0.2, 0.8], [0.6, 0.4]]);
        let t = m(&[[1.0, 0.0], [0.0, 1.0]]);
        let weighted = cross_entropy(&p, &t, Some(&[2.0, 0.0])).unwrap();
        let first = cross_entropy(&m(&[[0.2, 0.8]]), &m(&[[1.0, 0.0]]), None).unwrap();
        // the first row contributes first.value / 2 to an unweighted 2-row mean
        assert!((weighted.value - 2.0 * (first.value / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_floors_zero_probability() {
        let out = cross_entropy(&m(&[[0.0, 1.0]]), &m(&[[1.0, 0.0]]), None).unwrap();
        assert_eq!(out.floor_events, 1);
        assert!((out.value + libm::log(PROB_FLOOR)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_negative_weights() {
        let p = m(&[[0.5, 0.5]]);
        assert!(cross_entropy(&p, &p, Some(&[-1.0])).is_err());
    }

    #[test]
    fn kl_identity_and_analytic_value() {
        let p = m(&[[0.3, 0.7]]);
        assert_eq!(kl_divergence(&p, &p).unwrap().value, 0.0);
        let v = kl_divergence(&m(&[[1.0, 0.0]]), &m(&[[0.5, 0.5]])).unwrap().value;
        assert!((v - LN_2).abs() < 1e-15);
    }
}
