//! Synthetic query/key pairs whose product is diagonally dominant.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::markovlab::{markov_stats, MarkovStats, DEFAULT_EPS};
use crate::numkernel::{derive_seed, seeded, SeedRng, Tensor};
use crate::seqmodel::PolicyModel;

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthHead {
    /// `d_model x d_k`.
    pub wq: Tensor,
    /// `d_model x d_k`.
    pub wk: Tensor,
    /// Statistics of `wq · wkᵀ` at the requested level.
    pub stats: MarkovStats,
    pub attempts: usize,
}

/// Orthonormalizes the columns of a `rows x cols` matrix in place
/// (modified Gram-Schmidt). Fails on numerically dependent columns.
fn orthonormalize_columns(m: &mut Tensor) -> Result<()> {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        for p in 0..j {
            let dot: f64 = (0..rows).map(|i| m.get(i, j) * m.get(i, p)).sum();
            for i in 0..rows {
                let v = m.get(i, j) - dot * m.get(i, p);
                m.set(i, j, v);
            }
        }
        let norm = (0..rows).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::invalid("dependent columns while orthonormalizing"));
        }
        for i in 0..rows {
            let v = m.get(i, j) / norm;
            m.set(i, j, v);
        }
    }
    Ok(())
}

fn random_orthogonal(d: usize, rng: &mut SeedRng) -> Result<Tensor> {
    let mut m = Tensor::randn(&[d, d], 1.0, rng);
    orthonormalize_columns(&mut m)?;
    Ok(m)
}

/// Square case: `A = scale·(I + N)` with `N ~ N(0, 1/(2 r d)²)`, split as
/// `W_q = A M`, `W_k = M` for a random orthogonal `M`.
fn full_rank_candidate(d: usize, r: f64, scale: f64, rng: &mut SeedRng) -> Result<(Tensor, Tensor)> {
    let noise = Tensor::randn(&[d, d], 1.0 / (2.0 * r * d as f64), rng);
    let mut a = Tensor::eye(d);
    for (x, n) in a.data_mut().iter_mut().zip(noise.data()) {
        *x = scale * (*x + n);
    }
    let m = random_orthogonal(d, rng)?;
    Ok((a.matmul(&m)?, m))
}

/// Low-rank case: `U` spans `d_k` coordinate axes tilted by `delta` toward
/// the rest, rows shuffled. `W_q = scale·U`, `W_k = U`, so the product is
/// `scale·U Uᵀ`: near one on `d_k` diagonal entries, small positive on the
/// others, off-diagonal of order `delta`.
fn low_rank_candidate(d: usize, dk: usize, delta: f64, scale: f64, rng: &mut SeedRng) -> Result<(Tensor, Tensor)> {
    let tilt = Tensor::randn(&[d - dk, dk], delta, rng);
    let mut u = Tensor::zeros(&[d, dk]);
    for i in 0..dk {
        u.set(i, i, 1.0);
    }
    for i in 0..d - dk {
        for j in 0..dk {
            u.set(dk + i, j, tilt.get(i, j));
        }
    }
    orthonormalize_columns(&mut u)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let mut shuffled = Vec::with_capacity(d * dk);
    for &src in &order {
        shuffled.extend_from_slice(u.row(src));
    }
    let u = Tensor::new(vec![d, dk], shuffled)?;
    Ok((u.scale(scale), u))
}

/// A `(W_q, W_k)` pair whose product passes the Markov test at `r_target`,
/// with unit diagonal scale.
pub fn synth_markov_head(d_model: usize, d_k: usize, r_target: f64, seed: u64) -> Result<SynthHead> {
    synth_markov_head_scaled(d_model, d_k, r_target, 1.0, seed)
}

/// As [`synth_markov_head`] with the product multiplied by `scale > 0`.
/// Candidates are checked with the detector and redrawn on failure.
pub fn synth_markov_head_scaled(d_model: usize, d_k: usize, r_target: f64, scale: f64, seed: u64) -> Result<SynthHead> {
    if !(r_target > 1.0 && r_target.is_finite()) {
        return Err(Error::invalid(format!("r_target must exceed 1, got {r_target}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("scale must be positive"));
    }
    if d_model < 2 || d_k == 0 || d_k > d_model {
        return Err(Error::invalid(format!(
            "need 2 <= d_model and 1 <= d_k <= d_model, got d_model {d_model}, d_k {d_k}"
        )));
    }
    let mut rng = seeded(derive_seed(seed, "synth-markov-head"));
    let mut delta = if d_k < d_model {
        (d_model - 1) as f64 / (6.4 * (d_model - d_k) as f64 * r_target)
    } else {
        0.0
    };
    for attempt in 1..=MAX_ATTEMPTS {
        let candidate = if d_k == d_model {
            full_rank_candidate(d_model, r_target, scale, &mut rng)
        } else {
            low_rank_candidate(d_model, d_k, delta, scale, &mut rng)
        };
        if let Ok((wq, wk)) = candidate {
            let stats = markov_stats(&wq.matmul(&wk.transpose())?, r_target, DEFAULT_EPS)?;
            if stats.is_markov {
                return Ok(SynthHead {
                    wq,
                    wk,
                    stats,
                    attempts: attempt,
                });
            }
        }
        delta /= 2.0;
    }
    Err(Error::invalid(format!(
        "no Markov head at r = {r_target} after {MAX_ATTEMPTS} attempts (d_model {d_model}, d_k {d_k})"
    )))
}

/// Replaces the query and key projections of `heads` in `layer` with
/// synthetic Markov pairs. Each head gets its own derived seed.
pub fn install_synthetic_heads(
    model: &mut PolicyModel,
    layer: usize,
    heads: &[usize],
    r_target: f64,
    scale: f64,
    seed: u64,
) -> Result<()> {
    let cfg = model.config().clone();
    for &h in heads {
        let s = derive_seed(seed, &format!("layer{layer}.head{h}"));
        let head = synth_markov_head_scaled(cfg.d_model, cfg.d_k(), r_target, scale, s)?;
        model.set_query_key(layer, h, head.wq, head.wk)?;
    }
    Ok(())
}
