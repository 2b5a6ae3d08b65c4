//! PostureBalance: a noisy, open-loop-unstable linear system where the best
//! action depends only on the current state.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::envsuite::{Environment, Step};
use crate::error::{Error, Result};
use crate::numkernel::SeedRng;

pub const HORIZON: usize = 100;
pub const STATE_NOISE: f64 = 0.05;
/// State transition; eigenvalues ≈ 1.078 and 0.872.
pub const DYNAMICS: [[f64; 2]; 2] = [[1.0, 0.1], [0.1, 0.95]];
pub const INPUT: [f64; 2] = [0.0, 0.2];
/// Closed-loop poles of the reference controller.
pub const POLES: [f64; 2] = [0.5, 0.6];
const INIT_RANGE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct PostureBalance {
    pub noise_std: f64,
    state: [f64; 2],
    t: usize,
}

impl PostureBalance {
    pub fn new(noise_std: f64) -> Self {
        PostureBalance {
            noise_std,
            state: [0.0; 2],
            t: 0,
        }
    }

    /// Resets to a given state rather than a sampled one.
    pub fn reset_to(&mut self, state: [f64; 2]) -> Vec<f64> {
        self.state = state;
        self.t = 0;
        state.to_vec()
    }

    pub fn reward(position: f64) -> f64 {
        1.0 - position.abs().min(1.0)
    }
}

impl Default for PostureBalance {
    fn default() -> Self {
        Self::new(STATE_NOISE)
    }
}

/// State-feedback gain `K` (action `= -K s`) placing the closed-loop poles
/// of `D - E K` at [`POLES`], by Ackermann's formula.
pub fn stabilizing_gain() -> [f64; 2] {
    let d = DYNAMICS;
    let e = INPUT;
    // Controllability matrix C = [E, D E].
    let de = [d[0][0] * e[0] + d[0][1] * e[1], d[1][0] * e[0] + d[1][1] * e[1]];
    let det = e[0] * de[1] - de[0] * e[1];
    // Last row of C⁻¹.
    let last = [-e[1] / det, e[0] / det];
    // φ(D) = D² − (p1 + p2) D + p1 p2 I.
    let (s, p) = (POLES[0] + POLES[1], POLES[0] * POLES[1]);
    let mut phi = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let d2: f64 = (0..2).map(|m| d[i][m] * d[m][j]).sum();
            phi[i][j] = d2 - s * d[i][j] + if i == j { p } else { 0.0 };
        }
    }
    [
        last[0] * phi[0][0] + last[1] * phi[1][0],
        last[0] * phi[0][1] + last[1] * phi[1][1],
    ]
}

/// Unclipped reference action `-K s`.
pub fn reference_action(state: &[f64]) -> f64 {
    let k = stabilizing_gain();
    -(k[0] * state[0] + k[1] * state[1])
}

impl Environment for PostureBalance {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn max_steps(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, rng: &mut SeedRng) -> Vec<f64> {
        let s = [
            rng.random_range(-INIT_RANGE..=INIT_RANGE),
            rng.random_range(-INIT_RANGE..=INIT_RANGE),
        ];
        self.reset_to(s)
    }

    fn step(&mut self, action: &[f64], rng: &mut SeedRng) -> Result<Step> {
        if action.len() != 1 {
            return Err(Error::invalid(format!("PostureBalance takes 1 action value, got {}", action.len())));
        }
        if !action[0].is_finite() {
            return Err(Error::invalid("non-finite action"));
        }
        if self.t >= HORIZON {
            return Err(Error::invalid("step after the episode ended"));
        }
        let a = action[0].clamp(-1.0, 1.0);
        let s = self.state;
        let mut next = [0.0; 2];
        for (i, n) in next.iter_mut().enumerate() {
            *n = DYNAMICS[i][0] * s[0] + DYNAMICS[i][1] * s[1] + INPUT[i] * a;
        }
        if self.noise_std > 0.0 {
            let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
            for n in next.iter_mut() {
                *n += noise.sample(rng);
            }
        }
        self.state = next;
        self.t += 1;
        Ok(Step {
            state: next.to_vec(),
            reward: Self::reward(next[0]),
            done: self.t >= HORIZON,
            reached_goal: false,
        })
    }
}
