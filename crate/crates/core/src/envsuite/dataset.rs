//! Offline datasets and their line-delimited file format.
//!
//! A dataset file is UTF-8 JSON lines. Line 1 is the header:
//!
//! `{"format": "markovdt-dataset", "version": 1, "env": {...}, "quality": str,
//!   "seed": u64, "n_episodes": n, "state_dim": n, "action_dim": n, "stats": {...}}`
//!
//! followed by one record per episode, in episode order, with fields in this
//! order: `episode`, `length`, `return`, `rewards`, `rtg`, `states`,
//! `actions`. `states` and `actions` are arrays of per-timestep arrays.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envsuite::maze::BlindMaze;
use crate::envsuite::posture::reference_action;
use crate::envsuite::{EnvInstance, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::numkernel::{derive_seed, substream, SeedRng, Tensor};
use crate::seqmodel::Window;

pub const FORMAT_TAG: &str = "markovdt-dataset";
pub const FORMAT_VERSION: u32 = 1;

/// PostureBalance medium collector: half the reference gain plus Gaussian action noise.
pub const POSTURE_MEDIUM_GAIN: f64 = 0.5;
pub const POSTURE_MEDIUM_NOISE: f64 = 0.3;
pub const MAZE_MEDIUM_EPSILON: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Medium,
    /// Each episode draws its own behaviour quality.
    Mixture,
}

impl std::str::FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(Quality::Medium),
            "mixture" => Ok(Quality::Mixture),
            other => Err(Error::invalid(format!("unknown dataset quality {other:?}; expected medium or mixture"))),
        }
    }
}

/// Suffix sums: `out[t] = rewards[t] + out[t + 1]`.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rtg.first().copied().unwrap_or(0.0)
    }

    fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Dataset("empty episode".into()));
        }
        if self.states.len() != n || self.actions.len() != n || self.rtg.len() != n {
            return Err(Error::Dataset(format!(
                "episode arrays disagree: {} states, {} actions, {} rewards, {} returns-to-go",
                self.states.len(),
                self.actions.len(),
                n,
                self.rtg.len()
            )));
        }
        if self.states.iter().any(|s| s.len() != state_dim) || self.actions.iter().any(|a| a.len() != action_dim) {
            return Err(Error::Dataset("state or action width differs from the header".into()));
        }
        if compute_rtg(&self.rewards) != self.rtg {
            return Err(Error::Dataset("returns-to-go are not the suffix sums of the rewards".into()));
        }
        Ok(())
    }

    /// Up to `k` timesteps ending at `end`, with every action included.
    pub fn window(&self, end: usize, k: usize) -> Result<Window> {
        if end >= self.len() || k == 0 {
            return Err(Error::invalid(format!("window end {end} with k {k} on an episode of {}", self.len())));
        }
        let start = end + 1 - k.min(end + 1);
        let rows = |v: &[Vec<f64>]| -> Result<Tensor> {
            let width = v[0].len();
            Tensor::new(vec![end + 1 - start, width], v[start..=end].concat())
        };
        Ok(Window {
            rtg: self.rtg[start..=end].to_vec(),
            states: rows(&self.states)?,
            actions: rows(&self.actions)?,
            timesteps: (start..=end).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    /// Population standard deviation.
    pub state_std: Vec<f64>,
    pub max_return: f64,
    pub mean_return: f64,
}

impl NormStats {
    pub fn from_trajectories(trajectories: &[Trajectory], state_dim: usize) -> Self {
        let mut count = 0usize;
        let mut mean = vec![0.0; state_dim];
        let mut m2 = vec![0.0; state_dim];
        for s in trajectories.iter().flat_map(|t| &t.states) {
            count += 1;
            for i in 0..state_dim {
                let delta = s[i] - mean[i];
                mean[i] += delta / count as f64;
                m2[i] += delta * (s[i] - mean[i]);
            }
        }
        let std = m2.iter().map(|v| (v / count.max(1) as f64).sqrt()).collect();
        let returns: Vec<f64> = trajectories.iter().map(Trajectory::episode_return).collect();
        NormStats {
            state_mean: mean,
            state_std: std,
            max_return: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_return: returns.iter().sum::<f64>() / returns.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub env: EnvSpec,
    pub quality: Quality,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    /// Computed from `trajectories` only.
    pub stats: NormStats,
}

/// Runs one episode with `policy` choosing each action from the current state.
pub fn collect_episode<F>(env: &mut EnvInstance, rng: &mut SeedRng, mut policy: F) -> Result<Trajectory>
where
    F: FnMut(&[f64], &mut SeedRng) -> Vec<f64>,
{
    let mut state = env.reset(rng);
    let mut traj = Trajectory {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        rtg: Vec::new(),
    };
    if let EnvInstance::Maze(m) = env {
        if m.position() == m.goal() {
            return Err(Error::invalid("episode starts at the goal"));
        }
    }
    for _ in 0..env.max_steps() {
        let action = policy(&state, rng);
        let step = env.step(&action, rng)?;
        traj.states.push(state);
        traj.actions.push(action);
        traj.rewards.push(step.reward);
        state = step.state;
        if step.done {
            break;
        }
    }
    traj.rtg = compute_rtg(&traj.rewards);
    Ok(traj)
}

/// Posture collector: `clip(gain · (−K s) + N(0, noise²))`.
pub fn posture_behaviour(gain: f64, noise: f64) -> impl FnMut(&[f64], &mut SeedRng) -> Vec<f64> {
    let dist = Normal::new(0.0, noise.max(0.0)).expect("non-negative noise");
    move |s, rng| vec![(gain * reference_action(s) + dist.sample(rng)).clamp(-1.0, 1.0)]
}

/// Maze collector: a uniformly random move with probability `epsilon`,
/// otherwise the first shortest-path move.
pub fn maze_behaviour(maze: &BlindMaze, epsilon: f64) -> impl FnMut(&[f64], &mut SeedRng) -> Vec<f64> + use<> {
    let dist = maze.distances_to_goal();
    let probe = maze.clone();
    move |s, rng| {
        let cell = (s[0] as usize, s[1] as usize);
        let greedy = probe.optimal_move(cell, &dist);
        let m = match greedy {
            Some(m) if !rng.random_bool(epsilon.clamp(0.0, 1.0)) => m,
            _ => rng.random_range(0..4),
        };
        BlindMaze::encode_move(m)
    }
}

/// Collects `n_episodes` with the quality's behaviour policy. Episode `i`
/// draws from its own substream, so datasets are reproducible per seed.
pub fn generate_dataset(env: &EnvSpec, quality: Quality, n_episodes: usize, seed: u64) -> Result<OfflineDataset> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be at least 1"));
    }
    let base = derive_seed(seed, "dataset");
    let mut instance = env.build()?;
    let mut trajectories = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let mut rng = substream(base, i as u64);
        let traj = match &instance {
            EnvInstance::Posture(_) => {
                let (gain, noise) = match quality {
                    Quality::Medium => (POSTURE_MEDIUM_GAIN, POSTURE_MEDIUM_NOISE),
                    Quality::Mixture => (rng.random_range(0.2..=1.0), rng.random_range(0.05..=0.6)),
                };
                collect_episode(&mut instance, &mut rng, posture_behaviour(gain, noise))?
            }
            EnvInstance::Maze(m) => {
                let eps = match quality {
                    Quality::Medium => MAZE_MEDIUM_EPSILON,
                    Quality::Mixture => rng.random_range(0.0..=0.8),
                };
                let policy = maze_behaviour(m, eps);
                collect_episode(&mut instance, &mut rng, policy)?
            }
        };
        trajectories.push(traj);
    }
    let stats = NormStats::from_trajectories(&trajectories, env.state_dim());
    Ok(OfflineDataset {
        env: env.clone(),
        quality,
        seed,
        trajectories,
        stats,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    env: EnvSpec,
    quality: Quality,
    seed: u64,
    n_episodes: usize,
    state_dim: usize,
    action_dim: usize,
    stats: NormStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    episode: usize,
    length: usize,
    #[serde(rename = "return")]
    episode_return: f64,
    rewards: Vec<f64>,
    rtg: Vec<f64>,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

impl OfflineDataset {
    pub fn state_dim(&self) -> usize {
        self.env.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.env.action_dim()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            env: self.env.clone(),
            quality: self.quality,
            seed: self.seed,
            n_episodes: self.trajectories.len(),
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            stats: self.stats.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (i, t) in self.trajectories.iter().enumerate() {
            let rec = Record {
                episode: i,
                length: t.len(),
                episode_return: t.episode_return(),
                rewards: t.rewards.clone(),
                rtg: t.rtg.clone(),
                states: t.states.clone(),
                actions: t.actions.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Dataset("empty file".into()))??;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| Error::Dataset(format!("bad header line: {e}")))?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset format {:?} version {} (expected {FORMAT_TAG:?} version {FORMAT_VERSION})",
                header.format, header.version
            )));
        }
        if header.state_dim != header.env.state_dim() || header.action_dim != header.env.action_dim() {
            return Err(Error::Dataset("header dimensions do not match the environment".into()));
        }
        let mut trajectories = Vec::with_capacity(header.n_episodes);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("episode line {}: {e}", i + 2)))?;
            if rec.episode != trajectories.len() || rec.length != rec.rewards.len() {
                return Err(Error::Dataset(format!("episode line {} is out of order or mislabelled", i + 2)));
            }
            let t = Trajectory {
                states: rec.states,
                actions: rec.actions,
                rewards: rec.rewards,
                rtg: rec.rtg,
            };
            t.validate(header.state_dim, header.action_dim)?;
            if t.episode_return() != rec.episode_return {
                return Err(Error::Dataset(format!("episode {} return disagrees with its rewards", rec.episode)));
            }
            trajectories.push(t);
        }
        if trajectories.len() != header.n_episodes {
            return Err(Error::Dataset(format!(
                "header announces {} episodes, file holds {}",
                header.n_episodes,
                trajectories.len()
            )));
        }
        Ok(OfflineDataset {
            env: header.env,
            quality: header.quality,
            seed: header.seed,
            trajectories,
            stats: header.stats,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(BufReader::new(fs::File::open(path)?))
    }
}
