//! Offline fine-tuning with the action-regression loss and the optional
//! gate-mass penalty.

mod config;
mod loss;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use loss::{dt_loss, dt_loss_batch, gate_column_means, penalty_loss, LossBreakdown};

use crate::envsuite::OfflineDataset;
use crate::error::{Error, Result};
use crate::numkernel::{adam_step, derive_seed, seeded, AdamConfig, AdamState, SeedRng, Tape, Tensor};
use crate::seqmodel::{freeze_mask, ForwardOptions, PolicyModel, Window};
use crate::weightsio::save_checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Batch `dt_loss` at every step, index 0 is step 1.
    pub dt_history: Vec<f64>,
    /// Records at the logging interval.
    pub log: Vec<StepRecord>,
    pub checkpoints: Vec<(u64, PathBuf)>,
}

impl TrainReport {
    /// Mean `dt_loss` over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let h = &self.dt_history;
        if h.is_empty() {
            return None;
        }
        let tail = &h[h.len().saturating_sub(n)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Copies the dataset's state statistics into the model's normalization buffers.
pub fn fit_normalization(model: &mut PolicyModel, dataset: &OfflineDataset) -> Result<()> {
    model.set_state_normalization(&dataset.stats.state_mean, &dataset.stats.state_std)
}

/// Draws windows so that every stored timestep is equally likely to be the
/// window's last position. Windows near an episode start are shorter than `k`.
pub struct WindowSampler<'a> {
    dataset: &'a OfflineDataset,
    /// Cumulative episode lengths.
    offsets: Vec<usize>,
    k: usize,
}

impl<'a> WindowSampler<'a> {
    pub fn new(dataset: &'a OfflineDataset, k: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(dataset.trajectories.len());
        let mut acc = 0;
        for t in &dataset.trajectories {
            acc += t.len();
            offsets.push(acc);
        }
        if acc == 0 {
            return Err(Error::Dataset("dataset holds no timesteps".into()));
        }
        Ok(WindowSampler { dataset, offsets, k })
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().expect("non-empty")
    }

    /// Window ending at global timestep index `idx`.
    pub fn window_at(&self, idx: usize) -> Result<Window> {
        let ep = self.offsets.partition_point(|&o| o <= idx);
        let start = if ep == 0 { 0 } else { self.offsets[ep - 1] };
        self.dataset.trajectories[ep].window(idx - start, self.k)
    }

    pub fn sample(&self, rng: &mut SeedRng) -> Result<Window> {
        self.window_at(rng.random_range(0..self.total()))
    }
}

struct SampleResult {
    grads: Vec<Option<Tensor>>,
    dt: f64,
    gates: Vec<Tensor>,
}

/// Loss, gate rows and gradients for one window. `batch` and `batch_tokens`
/// set the scaling so that summing over the batch gives the batch objective.
fn sample_gradients(
    model: &PolicyModel,
    mask: &[bool],
    window: &Window,
    cfg: &TrainConfig,
    batch: usize,
    batch_tokens: usize,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, Some(mask));
    let out = model.forward_on_tape(&mut tape, &vars, window, &ForwardOptions::default())?;
    let target = tape.constant(window.actions.clone());
    let diff = tape.sub(out.actions, target)?;
    let sq = tape.mul(diff, diff)?;
    let sq_sum = tape.sum(sq);
    let dt = tape.value(sq_sum).item()?;
    let mut objective = tape.scale(sq_sum, 1.0 / batch as f64);
    if cfg.alpha > 0.0 {
        for (l, heads) in cfg.markov_heads.iter().enumerate() {
            for &h in heads {
                let col = tape.column(out.gates[l], h)?;
                let s = tape.sum(col);
                let term = tape.scale(s, cfg.alpha / batch_tokens as f64);
                objective = tape.add(objective, term)?;
            }
        }
    }
    let mut grads = tape.backward(objective)?;
    Ok(SampleResult {
        grads: vars.iter().map(|&v| grads.take(v)).collect(),
        dt,
        gates: out.gates.iter().map(|&g| tape.value(g).clone()).collect(),
    })
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ck_step{step:06}.mhw"))
}

/// Fine-tunes `model` in place.
///
/// Each step samples `batch_size` windows, regresses every action in each
/// window, and applies one Adam update to the parameters the freeze mode
/// allows. With `out_dir`, checkpoints go to `ck_step{NNNNNN}.mhw` (step 0
/// and the final step always, plus every `checkpoint_every`), the final one
/// is copied to `ck_final.mhw`, and records go to `metrics.jsonl`.
/// Results depend only on the model, dataset and config.
pub fn train(
    model: &mut PolicyModel,
    dataset: &OfflineDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.trajectories.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let mc = model.config().clone();
    if dataset.state_dim() != mc.state_dim || dataset.action_dim() != mc.action_dim {
        return Err(Error::invalid(format!(
            "dataset dims (state {}, action {}) differ from the model's (state {}, action {})",
            dataset.state_dim(),
            dataset.action_dim(),
            mc.state_dim,
            mc.action_dim
        )));
    }
    if cfg.context_k > mc.context_k {
        return Err(Error::invalid(format!(
            "train context_k {} exceeds the model's {}",
            cfg.context_k, mc.context_k
        )));
    }
    loss::check_markov_heads(&cfg.markov_heads, mc.n_layers, mc.n_heads)?;

    let sampler = WindowSampler::new(dataset, cfg.context_k)?;
    let mask = freeze_mask(model, cfg.freeze);
    let mut adam_cfg = AdamConfig::new(cfg.learning_rate, cfg.warmup_steps);
    adam_cfg.weight_decay = cfg.weight_decay;
    let mut adam = AdamState::new(model.params().tensors());
    let mut rng = seeded(derive_seed(cfg.seed, "train-batches"));

    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut report = TrainReport::default();
    if let Some(dir) = out_dir {
        let p = checkpoint_path(dir, 0);
        save_checkpoint(model, &p)?;
        report.checkpoints.push((0, p));
    }

    for step in 1..=cfg.steps {
        let windows: Vec<Window> = (0..cfg.batch_size).map(|_| sampler.sample(&mut rng)).collect::<Result<_>>()?;
        let batch_tokens: usize = windows.iter().map(Window::token_count).sum();
        let model_ref: &PolicyModel = model;
        let results: Vec<SampleResult> = windows
            .par_iter()
            .map(|w| sample_gradients(model_ref, &mask, w, cfg, cfg.batch_size, batch_tokens))
            .collect::<Result<_>>()?;

        let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut dt = 0.0;
        for r in &results {
            dt += r.dt;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    acc.add_assign(g)?;
                }
            }
        }
        let dt = dt / cfg.batch_size as f64;
        let lr = adam_step(model.params_mut().tensors_mut(), &grads, &mut adam, &adam_cfg, Some(&mask))?;
        report.dt_history.push(dt);

        let log_now = step == 1 || step == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0);
        if log_now {
            let stacked: Vec<Tensor> = (0..mc.n_layers)
                .map(|l| {
                    let parts: Vec<&Tensor> = results.iter().map(|r| &r.gates[l]).collect();
                    Tensor::vstack(&parts)
                })
                .collect::<Result<_>>()?;
            let rec = StepRecord {
                step,
                lr,
                loss: penalty_loss(dt, &stacked, &cfg.markov_heads, cfg.alpha)?,
            };
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            report.log.push(rec);
        }
        if let Some(dir) = out_dir {
            if step != cfg.steps && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let p = checkpoint_path(dir, step);
                save_checkpoint(model, &p)?;
                report.checkpoints.push((step, p));
            }
        }
    }

    if let Some(dir) = out_dir {
        if cfg.steps > 0 {
            let p = checkpoint_path(dir, cfg.steps);
            save_checkpoint(model, &p)?;
            report.checkpoints.push((cfg.steps, p));
        }
        save_checkpoint(model, &dir.join("ck_final.mhw"))?;
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Ok(report)
}
