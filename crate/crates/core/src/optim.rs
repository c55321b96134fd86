//! AdamW with decoupled weight decay and a polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Polynomial decay from `base_lr` to `min_lr` over `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub power: f64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { base_lr: 1e-4, min_lr: 1e-5, power: 3.0, total_steps: 1 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.base_lr >= self.min_lr && self.base_lr.is_finite()) {
            return Err(Error::config(
                "optim.base_lr",
                format!("need base_lr >= min_lr > 0, got {} and {}", self.base_lr, self.min_lr),
            ));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::config("optim.power", format!("must be positive, got {}", self.power)));
        }
        if self.total_steps == 0 {
            return Err(Error::config("optim.total_steps", "must be >= 1"));
        }
        Ok(())
    }
}

/// `(base − min)·(1 − step/total)^power + min`. Steps past the end return
/// `min_lr`.
pub fn poly_lr(step: u64, s: &ScheduleConfig) -> f64 {
    if step >= s.total_steps {
        return s.min_lr;
    }
    let frac = 1.0 - step as f64 / s.total_steps as f64;
    (s.base_lr - s.min_lr) * frac.powf(s.power) + s.min_lr
}

/// AdamW hyperparameters other than the learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { weight_decay: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("optim.{key}"), format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// First and second moments for each parameter tensor plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    /// Reject non-finite gradients instead of applying them.
    pub check_finite: bool,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
            check_finite: false,
        }
    }
}

/// One bias-corrected Adam update with decay applied directly to the
/// weights: `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`.
///
/// Returns the number of scalars updated.
pub fn adamw_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<usize> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.numel() {
            return Err(Error::shape(format!(
                "parameter {i}: shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if state.check_finite && !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr_t = T::of(lr);
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let eps = T::of(cfg.eps);
    let one = T::one();
    let mut touched = 0;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gr;
            *vi = b2 * *vi + (one - b2) * gr * gr;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
        touched += p.numel();
    }
    Ok(touched)
}
