//! Adam and the learning-rate schedules.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter tensor, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.data().len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, params: &ParamStore<f32>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, _, t), (m, v))| m.len() == t.data().len() && v.len() == t.data().len())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        Adam {
            config,
            state: AdamState::new(params),
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState, params: &ParamStore<f32>) -> Result<Self> {
        if !state.matches(params) {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        Ok(Adam { config, state })
    }

    /// One bias-corrected update using the gradients accumulated on `params`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if !self.state.matches(params) {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let (one_minus_b1, one_minus_b2) = ((1.0 - beta1) as f32, (1.0 - beta2) as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = eps as f32;
        for ((tensor, m), v) in params.tensors_mut().zip(&mut self.state.m).zip(&mut self.state.v) {
            let grad = tensor.grad().map(<[f32]>::to_vec);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + one_minus_b1 * g;
                v[i] = b2 * v[i] + one_minus_b2 * g * g;
                data[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// `lr0 · 0.5^⌊it / period⌋`.
    StepHalving { period: u64 },
    /// `min + (lr0 - min)(1 + cos(π it / horizon)) / 2`, held at `min` after
    /// the horizon.
    Cosine { min_lr: f64, horizon: u64 },
}

impl Schedule {
    pub fn validate(&self, lr_init: f64, total_iterations: u64) -> Result<()> {
        if !(lr_init > 0.0) {
            return Err(Error::Config(format!("initial learning rate must be positive, got {lr_init}")));
        }
        match *self {
            Schedule::StepHalving { period } => {
                if period == 0 || period > total_iterations {
                    return Err(Error::Config(format!(
                        "halving period {period} must be in 1..={total_iterations}"
                    )));
                }
            }
            Schedule::Cosine { min_lr, horizon } => {
                if !(min_lr > 0.0) || min_lr > lr_init {
                    return Err(Error::Config(format!(
                        "cosine floor {min_lr} must be positive and at most {lr_init}"
                    )));
                }
                if horizon == 0 {
                    return Err(Error::Config("cosine horizon must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn lr_at(schedule: Schedule, lr_init: f64, iteration: u64) -> f64 {
    match schedule {
        Schedule::StepHalving { period } => {
            let halvings = (iteration / period).min(i32::MAX as u64) as i32;
            lr_init * 0.5f64.powi(halvings)
        }
        Schedule::Cosine { min_lr, horizon } => {
            let frac = iteration.min(horizon) as f64 / horizon as f64;
            min_lr + 0.5 * (lr_init - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}
