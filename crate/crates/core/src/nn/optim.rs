//! Adam with a step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::model::{GradientSet, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `lr(t) = base_lr · 0.5^⌊t / halve_every⌋`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub halve_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base_lr: 1e-3, halve_every: 1000 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, round: usize) -> f64 {
        if self.halve_every == 0 {
            return self.base_lr;
        }
        let halvings = (round / self.halve_every).min(1074) as i32;
        self.base_lr * 0.5f64.powi(halvings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub schedule: LrSchedule,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, schedule: LrSchedule, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { first_moment: zeros.clone(), second_moment: zeros, step: 0, schedule, config }
    }
}

/// One bias-corrected Adam update at the learning rate scheduled for `round`.
pub fn adam_step(params: &mut ModelParams, grads: &GradientSet, state: &mut OptimizerState, round: usize) -> Result<()> {
    if grads.tensors.len() != params.num_tensors() || state.first_moment.len() != params.num_tensors() {
        return Err(Error::Shape("gradient/optimizer state not congruent with params".into()));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let lr = state.schedule.lr_at(round);
    let t = state.step.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(&grads.tensors)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        if !p.same_shape(g) || !p.same_shape(m) {
            return Err(Error::Shape(format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
