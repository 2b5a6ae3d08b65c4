//! Synthetic control tasks and offline dataset generation.

pub mod dataset;
pub mod maze;
pub mod posture;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numkernel::SeedRng;

pub use dataset::{
    collect_episode, compute_rtg, generate_dataset, NormStats, OfflineDataset, Quality, Trajectory,
};
pub use maze::BlindMaze;
pub use posture::PostureBalance;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    /// Goal reached or step cap hit.
    pub done: bool,
    pub reached_goal: bool,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn max_steps(&self) -> usize;
    /// Discount; every task here is undiscounted.
    fn gamma(&self) -> f64 {
        1.0
    }
    fn reset(&mut self, rng: &mut SeedRng) -> Vec<f64>;
    /// Actions outside the box are clipped (continuous) or decoded by argmax
    /// (discrete).
    fn step(&mut self, action: &[f64], rng: &mut SeedRng) -> Result<Step>;
}

/// Serializable description of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Posture {
        #[serde(default = "default_posture_noise")]
        noise_std: f64,
    },
    Maze {
        size: usize,
        layout_seed: u64,
    },
    /// Explicit square layout, one string per row: `#` wall, `.` open.
    CustomMaze {
        rows: Vec<String>,
        goal: [usize; 2],
    },
}

fn default_posture_noise() -> f64 {
    posture::STATE_NOISE
}

pub fn posture_env() -> EnvSpec {
    EnvSpec::Posture {
        noise_std: posture::STATE_NOISE,
    }
}

pub fn blindmaze_env(size: usize, layout_seed: u64) -> Result<EnvSpec> {
    let spec = EnvSpec::Maze { size, layout_seed };
    spec.build()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvInstance {
    Posture(PostureBalance),
    Maze(BlindMaze),
}

impl EnvSpec {
    pub fn build(&self) -> Result<EnvInstance> {
        Ok(match *self {
            EnvSpec::Posture { noise_std } => {
                if !(noise_std >= 0.0 && noise_std.is_finite()) {
                    return Err(crate::error::Error::invalid("posture noise must be non-negative"));
                }
                EnvInstance::Posture(PostureBalance::new(noise_std))
            }
            EnvSpec::Maze { size, layout_seed } => EnvInstance::Maze(BlindMaze::new(size, layout_seed)?),
            EnvSpec::CustomMaze { ref rows, goal } => {
                let size = rows.len();
                let mut walls = Vec::with_capacity(size * size);
                for row in rows {
                    if row.chars().count() != size {
                        return Err(crate::error::Error::invalid("custom maze rows must form a square"));
                    }
                    for c in row.chars() {
                        walls.push(match c {
                            '#' => true,
                            '.' => false,
                            other => {
                                return Err(crate::error::Error::invalid(format!(
                                    "custom maze cell {other:?}; expected '#' or '.'"
                                )))
                            }
                        });
                    }
                }
                EnvInstance::Maze(BlindMaze::from_layout(size, walls, (goal[0], goal[1]))?)
            }
        })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvSpec::Posture { .. } => 2,
            EnvSpec::Maze { .. } | EnvSpec::CustomMaze { .. } => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvSpec::Posture { .. } => 1,
            EnvSpec::Maze { .. } | EnvSpec::CustomMaze { .. } => 4,
        }
    }

    pub fn max_steps(&self) -> usize {
        match self {
            EnvSpec::Posture { .. } => posture::HORIZON,
            EnvSpec::Maze { .. } | EnvSpec::CustomMaze { .. } => maze::EPISODE_CAP,
        }
    }

    pub fn is_maze(&self) -> bool {
        !matches!(self, EnvSpec::Posture { .. })
    }

    pub fn name(&self) -> String {
        match self {
            EnvSpec::Posture { .. } => "posture".into(),
            EnvSpec::Maze { size, layout_seed } => format!("maze{size}-layout{layout_seed}"),
            EnvSpec::CustomMaze { rows, .. } => format!("custom-maze{}", rows.len()),
        }
    }
}

impl Environment for EnvInstance {
    fn state_dim(&self) -> usize {
        match self {
            EnvInstance::Posture(e) => e.state_dim(),
            EnvInstance::Maze(e) => e.state_dim(),
        }
    }

    fn action_dim(&self) -> usize {
        match self {
            EnvInstance::Posture(e) => e.action_dim(),
            EnvInstance::Maze(e) => e.action_dim(),
        }
    }

    fn max_steps(&self) -> usize {
        match self {
            EnvInstance::Posture(e) => e.max_steps(),
            EnvInstance::Maze(e) => e.max_steps(),
        }
    }

    fn reset(&mut self, rng: &mut SeedRng) -> Vec<f64> {
        match self {
            EnvInstance::Posture(e) => e.reset(rng),
            EnvInstance::Maze(e) => e.reset(rng),
        }
    }

    fn step(&mut self, action: &[f64], rng: &mut SeedRng) -> Result<Step> {
        match self {
            EnvInstance::Posture(e) => e.step(action, rng),
            EnvInstance::Maze(e) => e.step(action, rng),
        }
    }
}
