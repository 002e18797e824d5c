//! Adam and the plateau learning-rate scheduler with early stopping.

use super::{ParamSet, Result, Scalar, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based), then zeroes gradients.
///
/// Every gradient is checked before any weight moves, so a non-finite
/// gradient leaves the parameters untouched.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, cfg: &AdamConfig, lr: f64, t: u64) -> Result<()> {
    if t == 0 {
        return Err(TensorError::State("adam step index starts at 1".into()));
    }
    for e in params.entries() {
        let bad = e.grad.data().iter().filter(|g| !g.is_finite()).count();
        if bad > 0 {
            return Err(TensorError::NonFiniteGradient {
                name: e.name.clone(),
                count: bad,
            });
        }
    }
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(exp);
    let c2 = 1.0 - cfg.beta2.powi(exp);
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let step = T::from_f64_lossy(lr / c1);
    let inv_c2 = T::from_f64_lossy(1.0 / c2);
    let eps = T::from_f64_lossy(cfg.eps);
    for e in params.entries_mut() {
        let w = e.weights.data_mut();
        let g = e.grad.data_mut();
        let m = e.adam_m.data_mut();
        let v = e.adam_v.data_mut();
        for i in 0..w.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            w[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            g[i] = T::zero();
        }
    }
    Ok(())
}

/// How the early-stopping threshold is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EarlyStopMode {
    /// Stop after a long plateau of improvements no larger than the threshold.
    #[default]
    Delta,
    /// Stop as soon as the validation loss itself drops below the threshold.
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    pub plateau_patience: u32,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub early_stop_delta: f64,
    pub max_epochs: u32,
    #[serde(default)]
    pub early_stop_mode: EarlyStopMode,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 1e-5,
            plateau_patience: 5,
            lr_factor: 0.5,
            min_lr: 1e-10,
            early_stop_delta: 1e-5,
            max_epochs: 100,
            early_stop_mode: EarlyStopMode::Delta,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(TensorError::Schedule(format!(
                "lr_factor {} outside (0, 1)",
                self.lr_factor
            )));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.initial_lr) {
            return Err(TensorError::Schedule(format!(
                "min_lr {} must be positive and at most initial_lr {}",
                self.min_lr, self.initial_lr
            )));
        }
        if self.plateau_patience < 1 {
            return Err(TensorError::Schedule("plateau_patience must be >= 1".into()));
        }
        if !self.early_stop_delta.is_finite() || self.early_stop_delta < 0.0 {
            return Err(TensorError::Schedule("early_stop_delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of feeding one epoch's validation loss to the scheduler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub lr: f64,
    pub stop: bool,
    pub halved: bool,
}

/// Reduce-on-plateau scheduler.
///
/// An epoch counts as an improvement only if its loss is below the previous
/// epoch's loss by more than `early_stop_delta`. After `plateau_patience` non-improving epochs
/// the rate is multiplied by `lr_factor` (floored at `min_lr`) and the plateau
/// counter restarts. Training stops once `2 * plateau_patience` epochs have
/// passed without improvement and at least one reduction happened or the rate
/// sits at `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    schedule: TrainSchedule,
    lr: f64,
    prev: Option<f64>,
    plateau: u32,
    stale: u32,
    reductions: u32,
}

impl PlateauScheduler {
    pub fn new(schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            lr: schedule.initial_lr,
            schedule,
            prev: None,
            plateau: 0,
            stale: 0,
            reductions: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn reductions(&self) -> u32 {
        self.reductions
    }

    pub fn update(&mut self, val_loss: f64) -> ScheduleStep {
        let s = &self.schedule;
        let improved = match self.prev {
            None => true,
            Some(prev) => val_loss < prev - s.early_stop_delta,
        };
        self.prev = Some(val_loss);
        let mut halved = false;
        if improved {
            self.plateau = 0;
            self.stale = 0;
        } else {
            self.plateau += 1;
            self.stale += 1;
            if self.plateau >= s.plateau_patience {
                let next = (self.lr * s.lr_factor).max(s.min_lr);
                halved = next < self.lr;
                self.lr = next;
                self.reductions += 1;
                self.plateau = 0;
            }
        }
        let stop = match s.early_stop_mode {
            EarlyStopMode::Value => val_loss < s.early_stop_delta,
            EarlyStopMode::Delta => {
                self.stale >= 2 * s.plateau_patience && (self.lr <= s.min_lr || self.reductions >= 1)
            }
        };
        ScheduleStep {
            lr: self.lr,
            stop,
            halved,
        }
    }
}
