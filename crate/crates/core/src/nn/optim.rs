//! Adam with L2-coupled weight decay, and a reduce-on-plateau schedule.

use serde::{Deserialize, Serialize};

use super::matrix::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply decay directly to the weights (AdamW) instead of adding `wd·θ`
    /// to the gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            decoupled_weight_decay: false,
        }
    }
}

/// One named parameter tensor and its gradient.
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: &'a [T],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// Applies one update to every slot. Slots must arrive in the same order
    /// and with the same sizes on every call. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_, T>]) -> Result<()> {
        for slot in slots.iter() {
            if slot.grad.len() != slot.value.len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("{} ({} values)", slot.name, slot.value.len()),
                    format!("{} grads", slot.grad.len()),
                ));
            }
            if !slot.grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}", slot.name),
                    epoch: 0,
                    batch: 0,
                });
            }
        }
        if self.m.is_empty() {
            self.m = slots.iter().map(|s| vec![T::ZERO; s.value.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != slots.len()
            || self.m.iter().zip(slots.iter()).any(|(m, s)| m.len() != s.value.len())
        {
            return Err(Error::dim(
                "adam_step",
                format!("{} moment buffers", self.m.len()),
                format!("{} slots", slots.len()),
            ));
        }

        self.step += 1;
        let c = &self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_b1 = T::from_f64(1.0 - c.beta1);
        let one_b2 = T::from_f64(1.0 - c.beta2);
        let bc1 = T::from_f64(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::from_f64(1.0 - c.beta2.powf(self.step as f64));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        let wd = T::from_f64(c.weight_decay);
        let decoupled = c.decoupled_weight_decay;

        for ((slot, m), v) in slots.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..slot.value.len() {
                let theta = slot.value[i];
                let mut g = slot.grad[i];
                if !decoupled {
                    g += wd * theta;
                }
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut next = theta - lr * m_hat / (v_hat.sqrt() + eps);
                if decoupled {
                    next -= lr * wd * theta;
                }
                slot.value[i] = next;
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau driven by a score to maximize (validation HM).
///
/// An epoch improves when its score is strictly greater than the best so
/// far. Once `patience` consecutive epochs fail to improve, the rate is
/// multiplied by `factor` and the counter restarts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            lr: initial_lr,
            best: None,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Feeds one epoch's score and returns the rate for the next epoch.
    pub fn observe(&mut self, score: f64) -> f64 {
        match self.best {
            Some(best) if score <= best => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.reductions += 1;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(score);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Replays a whole score history and returns the resulting rate.
pub fn plateau_lr(history: &[f64], patience: usize, factor: f64, current_lr: f64) -> f64 {
    let mut s = PlateauScheduler::new(current_lr, patience, factor);
    for &h in history {
        s.observe(h);
    }
    s.lr()
}
