//! Tape-free kernels shared by the recorded operations and the analyzers.

use crate::error::{Error, Result};
use crate::numkernel::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Row-wise softmax where row `i` only sees columns `0..=i`.
///
/// Masked entries are exactly zero. Each row is shifted by its visible
/// maximum before exponentiation.
pub fn causal_softmax(scores: &Tensor) -> Result<Tensor> {
    if !scores.is_square() {
        return Err(Error::InvalidShape {
            op: "causal_softmax",
            msg: format!("expected a square score matrix, got {:?}", scores.shape()),
        });
    }
    let n = scores.cols();
    let src = scores.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &src[i * n..i * n + i + 1];
        softmax_into(row, &mut out[i * n..i * n + i + 1]);
    }
    Tensor::new(vec![n, n], out)
}

pub fn softmax_rows(scores: &Tensor) -> Result<Tensor> {
    let (m, n) = (scores.rows(), scores.cols());
    if n == 0 {
        return Err(Error::InvalidShape {
            op: "softmax_rows",
            msg: "zero columns".into(),
        });
    }
    let src = scores.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        softmax_into(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(scores.shape().to_vec(), out)
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rng::seeded;

    #[test]
    fn zero_scores_are_uniform_over_visible() {
        let p = causal_softmax(&Tensor::zeros(&[4, 4])).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert_eq!(p.get(i, j), want);
            }
        }
    }

    #[test]
    fn dominant_score_takes_all_mass() {
        let mut s = Tensor::zeros(&[3, 3]);
        s.set(2, 1, 1e9);
        let p = causal_softmax(&s).unwrap();
        assert!((p.get(2, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_exp_normalize() {
        let mut rng = seeded(11);
        let s = Tensor::randn(&[6, 6], 2.0, &mut rng);
        let p = causal_softmax(&s).unwrap();
        for i in 0..6 {
            let denom: f64 = (0..=i).map(|j| s.get(i, j).exp()).sum();
            for j in 0..6 {
                let want = if j <= i { s.get(i, j).exp() / denom } else { 0.0 };
                assert!((p.get(i, j) - want).abs() < 1e-12);
            }
            let row_sum: f64 = p.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_square_rejected() {
        assert!(causal_softmax(&Tensor::zeros(&[2, 3])).is_err());
    }
}
