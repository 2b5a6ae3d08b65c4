use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envsuite::maze::{GOAL_REWARD, STEP_REWARD};
use crate::envsuite::{EnvInstance, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::numkernel::{derive_seed, substream, Tensor};
use crate::seqmodel::{ForwardOptions, PolicyModel, Window};

/// Return-to-go used when a maze start cannot reach the goal.
pub const MAZE_FALLBACK_RTG: f64 = 0.7;

/// How the initial return-to-go of each episode is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TargetRtg {
    Fixed(f64),
    /// Maze only: the return of a shortest path from the sampled start,
    /// `1 − 0.01 · distance`.
    ShortestPath,
}

impl TargetRtg {
    fn resolve(self, env: &EnvInstance) -> f64 {
        match (self, env) {
            (TargetRtg::Fixed(v), _) => v,
            (TargetRtg::ShortestPath, EnvInstance::Maze(m)) => m
                .distance_from(m.position())
                .map_or(MAZE_FALLBACK_RTG, |d| GOAL_REWARD + STEP_REWARD * d as f64),
            (TargetRtg::ShortestPath, EnvInstance::Posture(_)) => MAZE_FALLBACK_RTG,
        }
    }
}

/// Picks the action for the last timestep of `window`, whose action row is
/// not yet filled.
pub trait Controller: Sync {
    fn act(&self, window: &Window, env: &EnvInstance) -> Result<Vec<f64>>;
}

/// The model's prediction at the final state token.
pub struct ModelController<'a> {
    pub model: &'a PolicyModel,
    pub options: ForwardOptions,
}

impl<'a> ModelController<'a> {
    pub fn new(model: &'a PolicyModel) -> Self {
        ModelController {
            model,
            options: ForwardOptions::default(),
        }
    }
}

impl Controller for ModelController<'_> {
    fn act(&self, window: &Window, _env: &EnvInstance) -> Result<Vec<f64>> {
        let out = self.model.forward(window, &self.options)?;
        Ok(out.actions.row(out.actions.rows() - 1).to_vec())
    }
}

/// Maze oracle: the first shortest-path move, ignoring the window.
pub struct ShortestPathController;

impl Controller for ShortestPathController {
    fn act(&self, _window: &Window, env: &EnvInstance) -> Result<Vec<f64>> {
        let EnvInstance::Maze(m) = env else {
            return Err(Error::invalid("the shortest-path controller only drives mazes"));
        };
        let dist = m.distances_to_goal();
        let mv = m.optimal_move(m.position(), &dist).unwrap_or(0);
        Ok(crate::envsuite::BlindMaze::encode_move(mv))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub target_rtg: f64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub length: usize,
    pub reached_goal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; 0 for a single value.
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        };
        MeanStderr { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: EnvSpec,
    pub context_k: usize,
    pub seed: u64,
    pub episodes: Vec<EpisodeResult>,
    pub episode_return: MeanStderr,
    pub episode_length: MeanStderr,
}

impl EvalReport {
    fn assemble(env: &EnvSpec, context_k: usize, seed: u64, episodes: Vec<EpisodeResult>) -> Self {
        let returns: Vec<f64> = episodes.iter().map(|e| e.episode_return).collect();
        let lengths: Vec<f64> = episodes.iter().map(|e| e.length as f64).collect();
        EvalReport {
            env: env.clone(),
            context_k,
            seed,
            episode_return: MeanStderr::of(&returns),
            episode_length: MeanStderr::of(&lengths),
            episodes,
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "env {}  k {}  seed {}  episodes {}\nreturn {:.4} ± {:.4}  length {:.2} ± {:.2}\n",
            self.env.name(),
            self.context_k,
            self.seed,
            self.episodes.len(),
            self.episode_return.mean,
            self.episode_return.stderr,
            self.episode_length.mean,
            self.episode_length.stderr
        );
        for e in &self.episodes {
            s.push_str(&format!(
                "  episode {:>3}  target {:>9.4}  return {:>9.4}  length {:>4}{}\n",
                e.episode,
                e.target_rtg,
                e.episode_return,
                e.length,
                if e.reached_goal { "  goal" } else { "" }
            ));
        }
        s
    }
}

/// One episode's history, from which context windows are cut.
struct History {
    rtg: Vec<f64>,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

impl History {
    /// The last `k` timesteps, without the pending action.
    fn window(&self, k: usize, action_dim: usize) -> Result<Window> {
        let n = self.rtg.len();
        let start = n - k.min(n);
        let rows = n - start;
        let states = Tensor::new(vec![rows, self.states[0].len()], self.states[start..].concat())?;
        let actions = Tensor::new(vec![rows - 1, action_dim], self.actions[start..].concat())?;
        Ok(Window {
            rtg: self.rtg[start..].to_vec(),
            states,
            actions,
            timesteps: (start..n).collect(),
        })
    }
}

/// Every context window a controller was queried with, per episode.
pub type VisitedWindows = Vec<Vec<Window>>;

/// Runs `n_episodes` with `controller`, episode `i` on its own RNG substream.
///
/// At each step the fed return-to-go is `target − Σ observed rewards`,
/// evaluated in that form. With `record`, the queried windows are returned.
pub fn rollout_with<C: Controller>(
    controller: &C,
    env: &EnvSpec,
    target: TargetRtg,
    context_k: usize,
    n_episodes: usize,
    seed: u64,
    record: bool,
) -> Result<(EvalReport, VisitedWindows)> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be at least 1"));
    }
    if context_k == 0 {
        return Err(Error::invalid("context_k must be at least 1"));
    }
    let base = derive_seed(seed, "rollout");
    let runs: Vec<(EpisodeResult, Vec<Window>)> = (0..n_episodes)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut rng = substream(base, i as u64);
            let mut inst = env.build()?;
            let state = inst.reset(&mut rng);
            let target_rtg = target.resolve(&inst);
            let action_dim = inst.action_dim();
            let mut hist = History {
                rtg: vec![target_rtg],
                states: vec![state],
                actions: Vec::new(),
            };
            let mut cumulative = 0.0;
            let mut visited = Vec::new();
            let mut reached = false;
            for _ in 0..inst.max_steps() {
                let window = hist.window(context_k, action_dim)?;
                let action = controller.act(&window, &inst)?;
                if record {
                    visited.push(window);
                }
                let step = inst.step(&action, &mut rng)?;
                cumulative += step.reward;
                hist.actions.push(action);
                reached = step.reached_goal;
                if step.done {
                    break;
                }
                hist.rtg.push(target_rtg - cumulative);
                hist.states.push(step.state);
            }
            Ok((
                EpisodeResult {
                    episode: i,
                    target_rtg,
                    episode_return: cumulative,
                    length: hist.actions.len(),
                    reached_goal: reached,
                },
                visited,
            ))
        })
        .collect::<Result<_>>()?;
    let (episodes, windows): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok((EvalReport::assemble(env, context_k, seed, episodes), windows))
}

fn check_dims(model: &PolicyModel, env: &EnvSpec, context_k: usize) -> Result<()> {
    let c = model.config();
    if c.state_dim != env.state_dim() || c.action_dim != env.action_dim() {
        return Err(Error::invalid(format!(
            "model dims (state {}, action {}) do not match env {} (state {}, action {})",
            c.state_dim,
            c.action_dim,
            env.name(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    if context_k > c.context_k {
        return Err(Error::invalid(format!("context_k {context_k} exceeds the model's {}", c.context_k)));
    }
    if env.max_steps() > c.max_timestep {
        return Err(Error::invalid(format!(
            "episodes of {} steps exceed the model's timestep table of {}",
            env.max_steps(),
            c.max_timestep
        )));
    }
    Ok(())
}

/// Autoregressive evaluation of `model`.
pub fn rollout(
    model: &PolicyModel,
    env: &EnvSpec,
    target: TargetRtg,
    context_k: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_dims(model, env, context_k)?;
    Ok(rollout_with(&ModelController::new(model), env, target, context_k, n_episodes, seed, false)?.0)
}

/// As [`rollout`], also returning every window the model was queried with.
pub fn rollout_recorded(
    model: &PolicyModel,
    env: &EnvSpec,
    target: TargetRtg,
    context_k: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<(EvalReport, VisitedWindows)> {
    check_dims(model, env, context_k)?;
    rollout_with(&ModelController::new(model), env, target, context_k, n_episodes, seed, true)
}
