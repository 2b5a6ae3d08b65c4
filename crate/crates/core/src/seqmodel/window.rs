use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// A contiguous slice of one trajectory, as fed to the model.
///
/// `actions` has either one row per timestep, or one fewer when the last
/// action is still to be predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub rtg: Vec<f64>,
    /// `T x state_dim`.
    pub states: Tensor,
    /// `T x action_dim` or `(T-1) x action_dim`.
    pub actions: Tensor,
    /// Absolute timestep of each row.
    pub timesteps: Vec<usize>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.rtg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtg.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        if self.actions.is_empty() {
            0
        } else {
            self.actions.rows()
        }
    }

    pub fn token_count(&self) -> usize {
        2 * self.len() + self.num_actions()
    }

    /// Position of the state token for timestep `t` within the window.
    pub fn state_position(t: usize) -> usize {
        3 * t + 1
    }

    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(Error::invalid("empty trajectory window"));
        }
        if self.timesteps.len() != t {
            return Err(Error::invalid(format!(
                "window has {t} returns but {} timesteps",
                self.timesteps.len()
            )));
        }
        if self.states.shape() != [t, state_dim] {
            return Err(Error::shape("window states", &[t, state_dim], self.states.shape()));
        }
        let na = self.num_actions();
        if na != t && na + 1 != t {
            return Err(Error::invalid(format!("window has {t} timesteps but {na} actions")));
        }
        if na > 0 && self.actions.shape() != [na, action_dim] {
            return Err(Error::shape("window actions", &[na, action_dim], self.actions.shape()));
        }
        Ok(())
    }

    /// The first `t + 1` timesteps, with the action at `t` dropped.
    pub fn prefix_for_prediction(&self, t: usize) -> Result<Window> {
        if t >= self.len() {
            return Err(Error::invalid(format!("prefix {t} beyond window length {}", self.len())));
        }
        let sd = self.states.cols();
        let ad = self.actions.cols();
        let states = Tensor::new(vec![t + 1, sd], self.states.data()[..(t + 1) * sd].to_vec())?;
        let actions = if t == 0 {
            Tensor::zeros(&[0, ad])
        } else {
            Tensor::new(vec![t, ad], self.actions.data()[..t * ad].to_vec())?
        };
        Ok(Window {
            rtg: self.rtg[..=t].to_vec(),
            states,
            actions,
            timesteps: self.timesteps[..=t].to_vec(),
        })
    }
}
