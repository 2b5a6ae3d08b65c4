//! How many bounded optimizer steps a Markov matrix survives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markovlab::stats::{markov_stats, MarkovStats, DEFAULT_EPS};
use crate::numkernel::{seeded, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepBound {
    Finite(u64),
    Unbounded,
}

impl StepBound {
    /// Whether a run of `steps` updates is covered by the guarantee.
    pub fn covers(self, steps: u64) -> bool {
        match self {
            StepBound::Finite(k) => steps < k,
            StepBound::Unbounded => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftBound {
    pub mean_abs_diag: f64,
    pub mean_abs_off: f64,
    pub min_diag: f64,
    /// Slack `ratio - r`.
    pub rho: f64,
    pub r: f64,
    pub eta0: f64,
    pub grad_bound: f64,
    /// Updates strictly below this keep the matrix Markov.
    pub k_max: StepBound,
}

/// Largest step count guaranteed to preserve the Markov property when every
/// update moves each entry by at most `eta0 * grad_bound`.
///
/// `K_max = floor(min(rho/(r+1) * mean|off| / (eta0 B), min_i A_ii / (eta0 B)))`.
pub fn drift_bound(a0: &Tensor, r: f64, eta0: f64, grad_bound: f64) -> Result<DriftBound> {
    if !(eta0 > 0.0 && eta0.is_finite()) {
        return Err(Error::invalid("drift_bound: eta0 must be positive"));
    }
    if !(grad_bound >= 0.0 && grad_bound.is_finite()) {
        return Err(Error::invalid("drift_bound: gradient bound must be non-negative"));
    }
    let s = markov_stats(a0, r, DEFAULT_EPS)?;
    if !s.is_markov {
        return Err(Error::NotMarkov {
            r,
            ratio: s.ratio,
            r1_pass: s.r1_pass,
        });
    }
    let rho = s.ratio - r;
    let k_max = if grad_bound == 0.0 {
        StepBound::Unbounded
    } else {
        let per_step = eta0 * grad_bound;
        let by_ratio = rho / (r + 1.0) * s.mean_abs_off / per_step;
        let by_diag = s.min_diag / per_step;
        StepBound::Finite(by_ratio.min(by_diag).floor() as u64)
    };
    Ok(DriftBound {
        mean_abs_diag: s.mean_abs_diag,
        mean_abs_off: s.mean_abs_off,
        min_diag: s.min_diag,
        rho,
        r,
        eta0,
        grad_bound,
        k_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Every diagonal entry shrinks and every off-diagonal entry grows in
    /// magnitude by the full step.
    WorstCase,
    /// Uniform learning rate in `(0, eta0]` and uniform gradients in `[-B, B]`.
    Random,
}

impl std::str::FromStr for DriftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "worst_case" => Ok(DriftMode::WorstCase),
            "random" => Ok(DriftMode::Random),
            other => Err(Error::invalid(format!("unknown drift mode {other:?}"))),
        }
    }
}

/// Applies `steps` bounded perturbations to `a0` and records the statistics
/// after each one. Entry `k` of the result is the state after `k + 1` steps.
pub fn adversarial_drift_test(
    a0: &Tensor,
    r: f64,
    eta0: f64,
    grad_bound: f64,
    steps: u64,
    mode: DriftMode,
    seed: u64,
) -> Result<Vec<MarkovStats>> {
    if !a0.is_square() || a0.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: "adversarial_drift_test",
            msg: format!("expected a square matrix, got {:?}", a0.shape()),
        });
    }
    let d = a0.rows();
    let mut a = a0.clone();
    let mut rng = seeded(seed);
    let mut trace = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        match mode {
            DriftMode::WorstCase => {
                let delta = eta0 * grad_bound;
                for i in 0..d {
                    for j in 0..d {
                        let v = a.get(i, j);
                        let moved = if i == j {
                            v - delta
                        } else if v >= 0.0 {
                            v + delta
                        } else {
                            v - delta
                        };
                        a.set(i, j, moved);
                    }
                }
            }
            DriftMode::Random => {
                let lr = eta0 * (1.0 - rng.random::<f64>());
                for v in a.data_mut() {
                    *v -= lr * rng.random_range(-grad_bound..=grad_bound);
                }
            }
        }
        trace.push(markov_stats(&a, r, DEFAULT_EPS)?);
    }
    Ok(trace)
}

/// Statistics of each matrix in a sequence, such as one head across
/// training checkpoints.
pub fn drift_track<'a, I>(snapshots: I, r: f64) -> Result<Vec<MarkovStats>>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    snapshots.into_iter().map(|a| markov_stats(a, r, DEFAULT_EPS)).collect()
}

/// Index of the first non-Markov entry in a trace.
pub fn first_violation(trace: &[MarkovStats]) -> Option<usize> {
    trace.iter().position(|s| !s.is_markov)
}
