//! ADAM with decoupled weight decay, early stopping and training configuration.

use serde::{Deserialize, Serialize};

use crate::loss::LossKind;
use crate::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `θ ← θ·(1 − lr·wd)` each step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update of a single tensor at (1-based) step `t`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig, t: u64) {
    assert_eq!(params.len(), grads.len());
    if state.m.len() != params.len() {
        *state = AdamState::zeros(params.len());
    }
    let b1t = 1.0 - cfg.beta1.powi(t as i32);
    let b2t = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / b1t;
        let vhat = *v / b2t;
        *p = *p * decay - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// AdamW over every trainable tensor of a model, in visit order.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step_count: u64,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            states: Vec::new(),
        }
    }

    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) {
        self.step_count += 1;
        let t = self.step_count;
        let cfg = self.config;
        let states = &mut self.states;
        let mut idx = 0;
        model.visit_params(&mut |p, g| {
            if states.len() <= idx {
                states.push(AdamState::zeros(p.len()));
            }
            adamw_step(p, g, &mut states[idx], &cfg, t);
            idx += 1;
        });
    }
}

/// True when the best (lowest) value is at least `patience` epochs old.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let Some(best) = history
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
    else {
        return false;
    };
    history.len() - 1 - best >= patience
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            loss: LossKind::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let a = &self.adam;
        if !(a.learning_rate > 0.0) || a.weight_decay < 0.0 {
            return Err("learning rate must be positive and weight decay non-negative".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err("batch size and epoch budget must be positive".into());
        }
        Ok(())
    }
}
