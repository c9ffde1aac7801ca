//! SGD with momentum and decoupled-by-rate weight decay, plus the step
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    /// Steps at which the rate is multiplied by `factor`.
    pub decay_steps: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.01,
            decay_steps: vec![2000, 4000],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::config(format!("train.schedule.initial must be positive, got {}", self.initial)));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::config(format!("train.schedule.factor must lie in (0, 1], got {}", self.factor)));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("train.schedule.decay_steps must increase strictly"));
        }
        Ok(())
    }

    /// Rate used for the update at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.decay_steps.iter().filter(|&&s| step >= s).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v`. Weight decay enters through the
/// gradient, so a zero rate leaves parameters untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Replaces the momentum buffers (e.g. from a checkpoint).
    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) -> Result<()> {
        if velocity.len() != self.velocity.len() || velocity.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::data("momentum buffers do not match the parameters"));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), self.velocity.len(), "one gradient per parameter");
        for ((t, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, g), v) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
    }
}
