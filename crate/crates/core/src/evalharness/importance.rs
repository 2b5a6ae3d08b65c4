use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{ForwardOptions, HeadRef, PolicyModel, Window};

/// Mean over evaluation steps of `‖õ − õ₋ᵢ‖₂`, where `õ` is the predicted
/// action at the final state token and `õ₋ᵢ` the same with head `i`'s output
/// zeroed (gate mass not redistributed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadImportance {
    /// Per layer, per head.
    pub scores: Vec<Vec<f64>>,
    pub steps: usize,
}

impl HeadImportance {
    /// Line-delimited `{layer, head, importance}` records.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for (l, row) in self.scores.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                let rec = serde_json::json!({"layer": l, "head": h, "importance": v});
                s.push_str(&serde_json::to_string(&rec)?);
                s.push('\n');
            }
        }
        Ok(s)
    }

    /// Mean score over `heads` of `layer`; `None` for an empty list.
    pub fn mean_over(&self, layer: usize, heads: &[usize]) -> Option<f64> {
        if heads.is_empty() {
            return None;
        }
        Some(heads.iter().map(|&h| self.scores[layer][h]).sum::<f64>() / heads.len() as f64)
    }
}

fn final_action(model: &PolicyModel, w: &Window, opts: &ForwardOptions) -> Result<Vec<f64>> {
    let out = model.forward(w, opts)?;
    Ok(out.actions.row(out.actions.rows() - 1).to_vec())
}

/// Zero-ablation importance over a fixed set of evaluation windows.
pub fn head_importance_on_windows(model: &PolicyModel, windows: &[Window]) -> Result<HeadImportance> {
    if windows.is_empty() {
        return Err(Error::invalid("no evaluation windows"));
    }
    let c = model.config();
    let (n_layers, n_heads) = (c.n_layers, c.n_heads);
    let per_window: Vec<Vec<f64>> = windows
        .par_iter()
        .map(|w| -> Result<Vec<f64>> {
            let base = final_action(model, w, &ForwardOptions::default())?;
            let mut shifts = Vec::with_capacity(n_layers * n_heads);
            for layer in 0..n_layers {
                for head in 0..n_heads {
                    let opts = ForwardOptions {
                        ablate: Some(HeadRef { layer, head }),
                        capture_attention: false,
                    };
                    let ablated = final_action(model, w, &opts)?;
                    shifts.push(base.iter().zip(&ablated).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
                }
            }
            Ok(shifts)
        })
        .collect::<Result<_>>()?;
    let mut scores = vec![vec![0.0; n_heads]; n_layers];
    for shifts in &per_window {
        for (i, s) in shifts.iter().enumerate() {
            scores[i / n_heads][i % n_heads] += s;
        }
    }
    for row in scores.iter_mut() {
        for v in row.iter_mut() {
            *v /= windows.len() as f64;
        }
    }
    Ok(HeadImportance {
        scores,
        steps: windows.len(),
    })
}

/// Gate mass at the final query token, averaged over evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateImportance {
    /// Sum over the listed first-layer heads.
    pub g_markov: f64,
    /// Per layer, per head mean gate score.
    pub per_layer: Vec<Vec<f64>>,
    pub markov_indices: Vec<usize>,
    pub steps: usize,
}

pub fn gate_importance_on_windows(
    model: &PolicyModel,
    windows: &[Window],
    markov_indices: &[usize],
) -> Result<GateImportance> {
    let c = model.config();
    if !c.moa_enabled {
        return Err(Error::invalid("gate importance needs a model with the attention gate enabled"));
    }
    if windows.is_empty() {
        return Err(Error::invalid("no evaluation windows"));
    }
    if let Some(&h) = markov_indices.iter().find(|&&h| h >= c.n_heads) {
        return Err(Error::invalid(format!("markov index {h} out of range (n_heads = {})", c.n_heads)));
    }
    let rows: Vec<Vec<Vec<f64>>> = windows
        .par_iter()
        .map(|w| -> Result<Vec<Vec<f64>>> {
            let out = model.forward(w, &ForwardOptions::default())?;
            Ok(out.gates.iter().map(|g| g.row(g.rows() - 1).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    let mut per_layer = vec![vec![0.0; c.n_heads]; c.n_layers];
    for r in &rows {
        for (acc, g) in per_layer.iter_mut().zip(r) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    for row in per_layer.iter_mut() {
        for v in row.iter_mut() {
            *v /= windows.len() as f64;
        }
    }
    let g_markov = markov_indices.iter().map(|&h| per_layer[0][h]).sum();
    Ok(GateImportance {
        g_markov,
        per_layer,
        markov_indices: markov_indices.to_vec(),
        steps: windows.len(),
    })
}
