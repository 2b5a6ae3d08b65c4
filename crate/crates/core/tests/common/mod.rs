#![allow(dead_code)]

pub mod fd;

use markovdt::markovlab::{markov_stats, DEFAULT_EPS};
use markovdt::numkernel::Tensor;
use rand::Rng;

/// Diagonal in `[0.5, 1.5]`, off-diagonal Gaussian rescaled so the
/// diagonal-dominance ratio is exactly `ratio` (up to the epsilon term).
pub fn markov_matrix_with_ratio(rng: &mut impl Rng, d: usize, ratio: f64) -> Tensor {
    let mut a = Tensor::randn(&[d, d], 1.0, rng);
    for i in 0..d {
        a.set(i, i, rng.random_range(0.5..1.5));
    }
    let s = markov_stats(&a, 1.0, 0.0).unwrap();
    let k = s.mean_abs_diag / (ratio * s.mean_abs_off);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                a.set(i, j, a.get(i, j) * k);
            }
        }
    }
    let check = markov_stats(&a, 1.0, DEFAULT_EPS).unwrap();
    assert!((check.ratio / ratio - 1.0).abs() < 1e-6);
    a
}

pub fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(i, p) * b.get(p, j);
            }
            out.set(i, j, s);
        }
    }
    out
}
