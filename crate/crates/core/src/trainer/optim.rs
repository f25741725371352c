use std::collections::BTreeMap;

use super::TrainConfig;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::OptimizerState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay: 1e-5 }
    }
}

/// One AdamW update with bias-corrected moments.
///
/// Weight decay is decoupled from the gradient: after the Adam step every
/// weight is shrunk by `decay_scale · weight_decay`, where the caller passes
/// the current lr relative to its peak so decay follows the schedule.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    decay_scale: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).map_err(|_| Error::ShapeMismatch(format!("gradient for unknown parameter '{name}'")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!("gradient for '{name}' is {:?}, parameter is {:?}", g.shape(), p.shape())));
        }
    }
    for (name, p) in params.iter() {
        for (store, what) in [(&state.m, "first"), (&state.v, "second")] {
            let s = store.get(name).map_err(|_| Error::ShapeMismatch(format!("{what} moment missing for '{name}'")))?;
            if s.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!("{what} moment for '{name}' has the wrong shape")));
            }
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let (c1, c2) = (1.0 - cfg.beta1.powf(t), 1.0 - cfg.beta2.powf(t));
    let shrink = 1.0 - decay_scale * cfg.weight_decay;
    for (name, p) in params.iter_mut() {
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        let g = grads.get(name).map(|g| g.data());
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            *theta = (*theta - step) * shrink;
        }
    }
    Ok(())
}

/// Linear warmup from 0 to the peak over `round(warmup_fraction · steps)`
/// updates, then linear decay to `final_lr_factor · peak` at `steps`, held
/// there afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr;
    let warmup = (cfg.warmup_fraction * cfg.steps as f64).round() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = cfg.steps.saturating_sub(warmup);
    let frac = if span == 0 { 1.0 } else { ((step - warmup) as f64 / span as f64).min(1.0) };
    peak * (1.0 - (1.0 - cfg.final_lr_factor) * frac)
}
