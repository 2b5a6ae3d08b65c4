//! Monte-Carlo estimate of `E[E A Eᵀ]` for standard normal `E`.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numkernel::{substream, Tensor};

/// Samples drawn from one substream.
const CHUNK: usize = 4096;
pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    /// `K x K` sample mean.
    pub mean: Tensor,
    /// Per-entry standard error of the mean.
    pub std_err: Tensor,
    pub n_samples: usize,
}

/// Running mean and sum of squared deviations for a block of entries.
#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    fn merge(mut self, other: &Moments) -> Self {
        if other.n == 0 {
            return self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.n += other.n;
        self
    }
}

/// Estimates `E[E A Eᵀ]` where `E` is `k x d` with i.i.d. standard normal
/// entries.
///
/// Work is split into fixed-size chunks, each drawing from its own
/// substream of `seed` and merged in chunk order, so the result does not
/// depend on the number of worker threads.
pub fn mc_expectation(a: &Tensor, k: usize, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if a.shape().len() != 2 || !a.is_square() {
        return Err(Error::InvalidShape {
            op: "mc_expectation",
            msg: format!("expected a square matrix, got {:?}", a.shape()),
        });
    }
    if k < 2 {
        return Err(Error::invalid("mc_expectation needs a sequence length of at least 2"));
    }
    if n_samples < MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "mc_expectation needs at least {MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    let d = a.rows();
    let n_chunks = n_samples.div_ceil(CHUNK);
    let parts: Vec<Moments> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(n_samples - c * CHUNK);
            let mut rng = substream(seed, c as u64);
            let mut moments = Moments::new(k * k);
            let mut e = vec![0.0; k * d];
            let mut ea = vec![0.0; k * d];
            let mut out = vec![0.0; k * k];
            for _ in 0..count {
                for v in e.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                for i in 0..k {
                    for j in 0..d {
                        ea[i * d + j] = (0..d).map(|p| e[i * d + p] * a.data()[p * d + j]).sum();
                    }
                }
                for i in 0..k {
                    for j in 0..k {
                        out[i * k + j] = (0..d).map(|p| ea[i * d + p] * e[j * d + p]).sum();
                    }
                }
                moments.push(&out);
            }
            moments
        })
        .collect();
    let total = parts
        .iter()
        .fold(Moments::new(k * k), |acc, p| acc.merge(p));
    let n = total.n as f64;
    let std_err = total.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect();
    Ok(McEstimate {
        mean: Tensor::new(vec![k, k], total.mean)?,
        std_err: Tensor::new(vec![k, k], std_err)?,
        n_samples,
    })
}
