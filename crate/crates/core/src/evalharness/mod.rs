//! Rollout evaluation, zero-ablation and gate importance, and context sweeps.

mod heatmap;
mod importance;
mod rollout;
mod sweep;

pub use heatmap::{pgm_bytes, text_heatmap, write_pgm};
pub use importance::{gate_importance_on_windows, head_importance_on_windows, GateImportance, HeadImportance};
pub use rollout::{
    rollout, rollout_recorded, rollout_with, Controller, EpisodeResult, EvalReport, MeanStderr, ModelController,
    ShortestPathController, TargetRtg, VisitedWindows, MAZE_FALLBACK_RTG,
};
pub use sweep::{context_sweep, SweepPoint, SweepRow, SweepTable};

use crate::envsuite::EnvSpec;
use crate::error::Result;
use crate::seqmodel::PolicyModel;

/// Rolls out `episodes` episodes, then scores every head by zero ablation
/// on the windows the model was queried with.
pub fn head_importance_ablation(
    model: &PolicyModel,
    env: &EnvSpec,
    target: TargetRtg,
    context_k: usize,
    episodes: usize,
    seed: u64,
) -> Result<HeadImportance> {
    let (_, windows) = rollout_recorded(model, env, target, context_k, episodes, seed)?;
    let flat: Vec<_> = windows.into_iter().flatten().collect();
    head_importance_on_windows(model, &flat)
}

/// `G_Markov` and per-head gate means over a rollout's query tokens.
pub fn gate_importance(
    model: &PolicyModel,
    env: &EnvSpec,
    target: TargetRtg,
    context_k: usize,
    episodes: usize,
    seed: u64,
    markov_indices: &[usize],
) -> Result<(GateImportance, EvalReport)> {
    let (report, windows) = rollout_recorded(model, env, target, context_k, episodes, seed)?;
    let flat: Vec<_> = windows.into_iter().flatten().collect();
    Ok((gate_importance_on_windows(model, &flat, markov_indices)?, report))
}
