use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Sum over timesteps of the squared Euclidean action error for one sequence.
pub fn dt_loss(predicted: &Tensor, target: &Tensor) -> Result<f64> {
    if predicted.shape() != target.shape() {
        return Err(Error::shape("dt_loss", predicted.shape(), target.shape()));
    }
    Ok(predicted.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum())
}

/// [`dt_loss`] averaged over a batch of `(predicted, target)` pairs.
pub fn dt_loss_batch(pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("dt_loss_batch: empty batch"));
    }
    let mut total = 0.0;
    for (p, t) in pairs {
        total += dt_loss(p, t)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dt_loss: f64,
    /// Sum over listed heads of their mean gate score.
    pub penalty: f64,
    pub alpha: f64,
    /// `dt_loss + alpha * penalty`.
    pub total: f64,
    /// Per layer, per head mean gate score over all tokens.
    pub gate_means: Vec<Vec<f64>>,
}

/// Column means of a `tokens x heads` gate matrix.
pub fn gate_column_means(gates: &Tensor) -> Vec<f64> {
    let (n, h) = (gates.rows(), gates.cols());
    let mut out = vec![0.0; h];
    for i in 0..n {
        for (o, g) in out.iter_mut().zip(gates.row(i)) {
            *o += g;
        }
    }
    out.iter().map(|s| s / n.max(1) as f64).collect()
}

pub(crate) fn check_markov_heads(markov_heads: &[Vec<usize>], n_layers: usize, n_heads: usize) -> Result<()> {
    if markov_heads.len() > n_layers {
        return Err(Error::invalid(format!(
            "markov heads listed for {} layers, model has {n_layers}",
            markov_heads.len()
        )));
    }
    for (l, heads) in markov_heads.iter().enumerate() {
        if let Some(&h) = heads.iter().find(|&&h| h >= n_heads) {
            return Err(Error::invalid(format!("markov head {h} in layer {l} out of range (n_heads = {n_heads})")));
        }
    }
    Ok(())
}

/// Adds the gate-mass penalty on listed heads.
///
/// `gate_scores[l]` stacks every token's gate row for layer `l` (batch rows
/// concatenated); `markov_heads[l]` lists the penalized heads of layer `l`
/// and may be shorter than the number of layers.
pub fn penalty_loss(dt: f64, gate_scores: &[Tensor], markov_heads: &[Vec<usize>], alpha: f64) -> Result<LossBreakdown> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("penalty alpha must be finite and >= 0, got {alpha}")));
    }
    let n_heads = gate_scores.first().map_or(0, Tensor::cols);
    if gate_scores.iter().any(|g| g.cols() != n_heads) {
        return Err(Error::invalid("gate score layers disagree on head count"));
    }
    check_markov_heads(markov_heads, gate_scores.len(), n_heads)?;
    let gate_means: Vec<Vec<f64>> = gate_scores.iter().map(gate_column_means).collect();
    let penalty: f64 = markov_heads
        .iter()
        .zip(&gate_means)
        .flat_map(|(heads, means)| heads.iter().map(move |&h| means[h]))
        .sum();
    Ok(LossBreakdown {
        dt_loss: dt,
        penalty,
        alpha,
        total: dt + alpha * penalty,
        gate_means,
    })
}
