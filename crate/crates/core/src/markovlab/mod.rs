//! Diagonal-dominance analysis of query-key products: detection, the
//! expectation under random embeddings, drift under bounded updates, and
//! attention concentration.

pub mod drift;
pub mod montecarlo;
pub mod probe;
pub mod stats;

pub use drift::{adversarial_drift_test, drift_bound, drift_track, first_violation, DriftBound, DriftMode, StepBound};
pub use montecarlo::{mc_expectation, McEstimate};
pub use probe::{attention_concentration_probe, paired_probe, shuffled_control, ProbeConfig};
pub use stats::{markov_stats, HeadVerdict, MarkovReport, MarkovStats, DEFAULT_EPS, DEFAULT_R};

use crate::error::Result;
use crate::numkernel::Tensor;
use crate::seqmodel::AttentionHeadParams;

/// `W_q · W_kᵀ` of a head.
pub fn head_qk_product(head: &AttentionHeadParams) -> Result<Tensor> {
    head.qk_product()
}
