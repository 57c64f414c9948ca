//! AdamW with decoupled weight decay and a warmup-cosine learning-rate
//! schedule.
//!
//! The update at step `t` for each coordinate, given gradient `g`:
//!
//! ```text
//! w <- w - lr * weight_decay * w          (decay before the Adam delta)
//! m <- beta1 * m + (1 - beta1) * g
//! v <- beta2 * v + (1 - beta2) * g^2
//! w <- w - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
//! ```
//!
//! A step either applies to every parameter or to none: gradients are
//! validated in full before any state is touched, so a rejected step
//! leaves parameters and moments exactly as they were.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::Parameter;
use crate::Result;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!(
                    "optimizer.{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!(
                "optimizer.eps must be positive and finite, got {}",
                self.eps
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "optimizer.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state: first/second moment buffers shaped like the parameter
/// list, plus a shared step counter that advances once per applied step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    /// Fresh zero-moment state for parameters of the given sizes.
    pub fn new(config: AdamWConfig, param_sizes: &[usize]) -> Result<AdamWState> {
        config.validate()?;
        Ok(AdamWState {
            config,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Rebuilds state from checkpointed moments and step counter.
    pub fn restore(
        config: AdamWConfig,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<AdamWState> {
        config.validate()?;
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Checkpoint(
                "optimizer moment buffers disagree in shape".into(),
            ));
        }
        Ok(AdamWState { config, step, m, v })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// First-moment buffers, aligned with the parameter list.
    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    /// Second-moment buffers, aligned with the parameter list.
    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one AdamW step to every parameter. `grads` must align with
    /// `params` element for element; any non-finite gradient rejects the
    /// whole step before any buffer is modified.
    pub fn apply(
        &mut self,
        params: &mut [Parameter],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer built for {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.values.len() != m.len() || g.len() != m.len() {
                return Err(Error::InvalidInput(format!(
                    "parameter {} has {} values and {} gradient entries, \
                     but the optimizer state holds {}",
                    p.name,
                    p.values.len(),
                    g.len(),
                    m.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite gradient for parameter {}; step rejected",
                    p.name
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
        {
            for i in 0..g.len() {
                let w = &mut p.values[i];
                *w -= lr * c.weight_decay * *w;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Warmup-cosine learning-rate schedule: a linear ramp from 0 to
/// `peak_lr` over the warmup span, then cosine decay to `min_lr` at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { peak_lr: 5e-6, min_lr: 1e-6, warmup_ratio: 0.03, total_steps: 1000 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!(
                "schedule.peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if self.min_lr < 0.0 || !self.min_lr.is_finite() {
            return Err(Error::Config(format!(
                "schedule.min_lr must be non-negative, got {}",
                self.min_lr
            )));
        }
        if self.min_lr > self.peak_lr {
            return Err(Error::Config(format!(
                "schedule.min_lr {} exceeds schedule.peak_lr {}",
                self.min_lr, self.peak_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "schedule.warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("schedule.total_steps must be positive".into()));
        }
        if self.warmup_steps() >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup spans {} of {} steps, leaving no room for cosine decay; \
                 lower schedule.warmup_ratio",
                self.warmup_steps(),
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Number of warmup steps: `round(warmup_ratio * total_steps)`.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).round() as u64
    }

    /// Learning rate at `step` (the trainer's steps are 1-indexed; step 0
    /// is the ramp origin and is never scheduled).
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidInput(format!(
                "step {step} past the end of a {}-step schedule",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps();
        if warmup > 0 && step <= warmup {
            return Ok(self.peak_lr * step as f64 / warmup as f64);
        }
        let progress = (step - warmup) as f64 / (self.total_steps - warmup) as f64;
        Ok(self.min_lr
            + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
