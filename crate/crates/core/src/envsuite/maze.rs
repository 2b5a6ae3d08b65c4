//! BlindMaze: a grid maze whose observation holds only the agent and goal
//! coordinates, never the walls.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::envsuite::{Environment, Step};
use crate::error::{Error, Result};
use crate::numkernel::{derive_seed, seeded, SeedRng};

pub const EPISODE_CAP: usize = 500;
pub const STEP_REWARD: f64 = -0.01;
pub const GOAL_REWARD: f64 = 1.0;
pub const SIZES: [usize; 3] = [5, 8, 12];
const WALL_DENSITY: f64 = 0.25;
const MAX_LAYOUT_TRIES: usize = 10_000;

/// Moves in action-index order: up, down, left, right (`y` grows downward).
pub const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Debug, Clone, PartialEq)]
pub struct BlindMaze {
    size: usize,
    /// Row-major, `true` where blocked.
    walls: Vec<bool>,
    goal: (usize, usize),
    pos: (usize, usize),
    t: usize,
    done: bool,
}

impl BlindMaze {
    /// Seeded layout with every open cell connected to every other.
    pub fn new(size: usize, layout_seed: u64) -> Result<Self> {
        if !SIZES.contains(&size) {
            return Err(Error::invalid(format!("maze size must be one of {SIZES:?}, got {size}")));
        }
        let mut rng = seeded(derive_seed(layout_seed, "blindmaze-layout"));
        for _ in 0..MAX_LAYOUT_TRIES {
            let walls: Vec<bool> = (0..size * size).map(|_| rng.random_bool(WALL_DENSITY)).collect();
            let open: Vec<usize> = (0..size * size).filter(|&i| !walls[i]).collect();
            let Some(&g) = open.choose(&mut rng) else { continue };
            if open.len() < 2 {
                continue;
            }
            let maze = Self::from_layout(size, walls, (g % size, g / size))?;
            if maze.distances_to_goal().iter().zip(&maze.walls).all(|(d, w)| *w || d.is_some()) {
                return Ok(maze);
            }
        }
        Err(Error::invalid("could not draw a connected maze layout"))
    }

    /// Explicit layout; no connectivity requirement.
    pub fn from_layout(size: usize, walls: Vec<bool>, goal: (usize, usize)) -> Result<Self> {
        if walls.len() != size * size {
            return Err(Error::invalid(format!("layout has {} cells, expected {}", walls.len(), size * size)));
        }
        if goal.0 >= size || goal.1 >= size || walls[goal.1 * size + goal.0] {
            return Err(Error::invalid("goal must be an open cell inside the grid"));
        }
        Ok(BlindMaze {
            size,
            walls,
            goal,
            pos: goal,
            t: 0,
            done: false,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        self.walls[y * self.size + x]
    }

    pub fn open_cells(&self) -> Vec<(usize, usize)> {
        (0..self.size * self.size)
            .filter(|&i| !self.walls[i])
            .map(|i| (i % self.size, i / self.size))
            .collect()
    }

    /// Cell reached by move `m` from `(x, y)`; blocked or off-grid moves stay put.
    pub fn neighbour(&self, (x, y): (usize, usize), m: usize) -> (usize, usize) {
        let (dx, dy) = MOVES[m];
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        if nx < 0 || ny < 0 || nx >= self.size as i64 || ny >= self.size as i64 {
            return (x, y);
        }
        let (nx, ny) = (nx as usize, ny as usize);
        if self.is_wall(nx, ny) {
            (x, y)
        } else {
            (nx, ny)
        }
    }

    /// Shortest move count from each cell to the goal (row-major); `None`
    /// for walls and unreachable cells.
    pub fn distances_to_goal(&self) -> Vec<Option<usize>> {
        let n = self.size;
        let mut dist = vec![None; n * n];
        let mut queue = VecDeque::new();
        dist[self.goal.1 * n + self.goal.0] = Some(0);
        queue.push_back(self.goal);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.1 * n + cell.0].expect("queued cells have a distance");
            // Moves are symmetric, so neighbours of a cell are its predecessors.
            for m in 0..4 {
                let next = self.neighbour(cell, m);
                let slot = &mut dist[next.1 * n + next.0];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    pub fn distance_from(&self, cell: (usize, usize)) -> Option<usize> {
        self.distances_to_goal()[cell.1 * self.size + cell.0]
    }

    /// First move index that strictly reduces the distance to the goal.
    pub fn optimal_move(&self, cell: (usize, usize), dist: &[Option<usize>]) -> Option<usize> {
        let here = dist[cell.1 * self.size + cell.0]?;
        (0..4).find(|&m| {
            let n = self.neighbour(cell, m);
            dist[n.1 * self.size + n.0].is_some_and(|d| d < here)
        })
    }

    /// Resets to a chosen open cell.
    pub fn reset_at(&mut self, cell: (usize, usize)) -> Result<Vec<f64>> {
        if cell.0 >= self.size || cell.1 >= self.size || self.is_wall(cell.0, cell.1) {
            return Err(Error::invalid(format!("start {cell:?} is not an open cell")));
        }
        self.pos = cell;
        self.t = 0;
        self.done = cell == self.goal;
        Ok(self.observation())
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.pos.0 as f64,
            self.pos.1 as f64,
            self.goal.0 as f64,
            self.goal.1 as f64,
        ]
    }

    /// Action vector whose largest entry is `m`.
    pub fn encode_move(m: usize) -> Vec<f64> {
        let mut a = vec![0.0; 4];
        a[m] = 1.0;
        a
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn decode_action(action: &[f64]) -> Result<usize> {
        if action.len() != 4 {
            return Err(Error::invalid(format!("BlindMaze takes 4 action values, got {}", action.len())));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite action"));
        }
        let mut best = 0;
        for i in 1..4 {
            if action[i] > action[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

impl Environment for BlindMaze {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        4
    }

    fn max_steps(&self) -> usize {
        EPISODE_CAP
    }

    /// Uniform over open cells other than the goal.
    fn reset(&mut self, rng: &mut SeedRng) -> Vec<f64> {
        let starts: Vec<(usize, usize)> = self.open_cells().into_iter().filter(|&c| c != self.goal).collect();
        let start = *starts.choose(rng).unwrap_or(&self.goal);
        self.reset_at(start).expect("open cell")
    }

    fn step(&mut self, action: &[f64], _rng: &mut SeedRng) -> Result<Step> {
        let m = Self::decode_action(action)?;
        if self.done || self.t >= EPISODE_CAP {
            return Err(Error::invalid("step after the episode ended"));
        }
        self.pos = self.neighbour(self.pos, m);
        self.t += 1;
        let reached = self.pos == self.goal;
        self.done = reached || self.t >= EPISODE_CAP;
        Ok(Step {
            state: self.observation(),
            reward: STEP_REWARD + if reached { GOAL_REWARD } else { 0.0 },
            done: self.done,
            reached_goal: reached,
        })
    }
}
