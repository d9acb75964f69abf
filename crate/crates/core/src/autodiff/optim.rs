//! RMSProp with stepped learning-rate decay.

use crate::error::{Error, Result};

/// RMSProp state: per-parameter running mean square of gradients plus the
/// hyperparameters. The learning rate decays by `decay_factor` once per
/// `decay_every` iterations.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    acc: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(rho: f64, eps: f64, base_lr: f64, decay_factor: f64, decay_every: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidConfig(format!("rmsprop rho must be in [0,1], got {rho}")));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig("rmsprop eps must be > 0".into()));
        }
        if !(base_lr > 0.0) {
            return Err(Error::InvalidConfig("rmsprop learning rate must be > 0".into()));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::InvalidConfig("rmsprop decay factor must be in (0,1]".into()));
        }
        if decay_every == 0 {
            return Err(Error::InvalidConfig("rmsprop decay period must be >= 1".into()));
        }
        Ok(Self { rho, eps, base_lr, decay_factor, decay_every, acc: Vec::new() })
    }

    /// The defaults used by the reconstruction loops: `rho = 0.99`,
    /// `eps = 1e-8`, `lr = 1e-4` decaying by `0.9` per `1000` iterations.
    pub fn reconstruction_default() -> Self {
        Self::new(0.99, 1e-8, 1e-4, 0.9, 1000).expect("defaults are valid")
    }

    /// `lr(iteration) = base_lr * decay_factor^(iteration / decay_every)`.
    pub fn lr(&self, iteration: usize) -> f64 {
        self.base_lr * self.decay_factor.powi((iteration / self.decay_every) as i32)
    }

    /// Update one parameter tensor in place:
    /// `acc <- rho*acc + (1-rho)*g^2; p <- p - lr(it)*g / (sqrt(acc) + eps)`.
    ///
    /// `slot` identifies the tensor so its accumulator persists across calls;
    /// accumulators are allocated on first use.
    pub fn step_tensor(
        &mut self,
        slot: usize,
        param: &mut [f64],
        grad: &[f64],
        iteration: usize,
    ) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::DimensionMismatch(format!(
                "rmsprop: param has {} values, grad has {}",
                param.len(),
                grad.len()
            )));
        }
        while self.acc.len() <= slot {
            self.acc.push(Vec::new());
        }
        let lr = self.lr(iteration);
        let acc = &mut self.acc[slot];
        if acc.is_empty() {
            acc.resize(param.len(), 0.0);
        } else if acc.len() != param.len() {
            return Err(Error::DimensionMismatch(format!(
                "rmsprop: slot {slot} accumulator has {} values, param has {}",
                acc.len(),
                param.len()
            )));
        }
        for ((p, &g), a) in param.iter_mut().zip(grad).zip(acc.iter_mut()) {
            *a = self.rho * *a + (1.0 - self.rho) * g * g;
            *p -= lr * g / (a.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Accumulators, for checkpointing.
    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.acc
    }

    pub fn set_accumulators(&mut self, acc: Vec<Vec<f64>>) {
        self.acc = acc;
    }
}
