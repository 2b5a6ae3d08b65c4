use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::tensor::Tensor;

/// Linear warmup to `peak`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
}

impl WarmupSchedule {
    /// Learning rate for update number `step` (1-based).
    pub fn rate(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.peak
        } else {
            self.peak * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub schedule: WarmupSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `θ -= η_k · wd · θ`.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, warmup_steps: u64) -> Self {
        AdamConfig {
            schedule: WarmupSchedule {
                peak: lr,
                warmup_steps,
            },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// One Adam update with bias correction.
///
/// `trainable[i] == false` leaves parameter `i` and its moments untouched.
/// Returns the learning rate used for this step.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    trainable: Option<&[bool]>,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    if let Some(mask) = trainable {
        if mask.len() != params.len() {
            return Err(Error::invalid("adam_step: mask length differs from params"));
        }
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), m.shape()));
        }
    }

    state.step += 1;
    let t = state.step;
    let lr = cfg.schedule.rate(t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    for (i, ((p, g), (m, v))) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
        .enumerate()
    {
        if trainable.is_some_and(|mask| !mask[i]) {
            continue;
        }
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for j in 0..pd.len() {
            let gj = g.data()[j];
            md[j] = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * gj;
            vd[j] = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            let decay = lr * cfg.weight_decay * pd[j];
            pd[j] -= lr * mhat / (vhat.sqrt() + cfg.eps) + decay;
        }
    }
    Ok(lr)
}
