//! How much attention the final query puts on its own position.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numkernel::ops::softmax_into;
use crate::numkernel::{seeded, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    /// Sequence length.
    pub k: usize,
    /// Scores are divided by `sqrt(d_k)`.
    pub d_k: usize,
    pub n_samples: usize,
    pub seed: u64,
}

fn check(a: &Tensor, cfg: &ProbeConfig) -> Result<usize> {
    if a.shape().len() != 2 || !a.is_square() {
        return Err(Error::InvalidShape {
            op: "attention_concentration_probe",
            msg: format!("expected a square matrix, got {:?}", a.shape()),
        });
    }
    if cfg.k == 0 || cfg.d_k == 0 || cfg.n_samples == 0 {
        return Err(Error::invalid("probe needs k, d_k and n_samples of at least 1"));
    }
    Ok(a.rows())
}

/// Mean causal-softmax weight that the last of `k` standard-normal
/// embeddings assigns to itself under scores `e_last A e_jᵀ / sqrt(d_k)`.
pub fn attention_concentration_probe(a: &Tensor, cfg: &ProbeConfig) -> Result<f64> {
    Ok(paired_probe(&[a], cfg)?[0])
}

/// Runs the probe for several matrices on the same sampled embeddings.
pub fn paired_probe(matrices: &[&Tensor], cfg: &ProbeConfig) -> Result<Vec<f64>> {
    let d = match matrices.first() {
        Some(a) => check(a, cfg)?,
        None => return Ok(Vec::new()),
    };
    for a in matrices {
        if check(a, cfg)? != d {
            return Err(Error::shape("paired_probe", matrices[0].shape(), a.shape()));
        }
    }
    let k = cfg.k;
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    let mut rng = seeded(cfg.seed);
    let mut e = vec![0.0; k * d];
    let mut qa = vec![0.0; d];
    let mut scores = vec![0.0; k];
    let mut weights = vec![0.0; k];
    let mut means = vec![0.0; matrices.len()];
    for n in 1..=cfg.n_samples {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let last = &e[(k - 1) * d..];
        for (m, a) in matrices.iter().enumerate() {
            for (j, q) in qa.iter_mut().enumerate() {
                *q = (0..d).map(|p| last[p] * a.data()[p * d + j]).sum();
            }
            for (j, s) in scores.iter_mut().enumerate() {
                *s = scale * (0..d).map(|p| qa[p] * e[j * d + p]).sum::<f64>();
            }
            softmax_into(&scores, &mut weights);
            // Incremental mean keeps identical samples exact.
            means[m] += (weights[k - 1] - means[m]) / n as f64;
        }
    }
    Ok(means)
}

/// `a` with its rows permuted so that no row stays in place. Entries and the
/// Frobenius norm are preserved; the diagonal is replaced by former
/// off-diagonal entries.
pub fn shuffled_control(a: &Tensor, seed: u64) -> Result<Tensor> {
    if a.shape().len() != 2 || !a.is_square() || a.rows() < 2 {
        return Err(Error::InvalidShape {
            op: "shuffled_control",
            msg: format!("expected a square matrix of size at least 2, got {:?}", a.shape()),
        });
    }
    let d = a.rows();
    let mut rng = seeded(seed);
    let mut perm: Vec<usize> = (0..d).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    let mut data = Vec::with_capacity(d * d);
    for &src in &perm {
        data.extend_from_slice(a.row(src));
    }
    Tensor::new(vec![d, d], data)
}
