//! SGD with momentum and weight decay, classic formulation:
//! v <- mu*v + g + wd*w, then w <- w - lr*v. The learning rate follows a
//! base value with x0.1 drops at iteration milestones.

use crate::error::{Error, Result};
use crate::graph::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations (0-based) at which the lr drops by 10x. Must be ascending.
    pub milestones: Vec<usize>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            milestones: vec![1600, 1900],
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("sgd base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("sgd momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("sgd weight_decay must be non-negative".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sgd milestones must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct OptimizerState {
    cfg: SgdConfig,
    /// One velocity buffer per parameter, same order as the store.
    velocities: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl OptimizerState {
    pub fn new(cfg: SgdConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let velocities = params
            .iter()
            .map(|(_, _, t)| vec![0.0; t.data.len()])
            .collect();
        Ok(OptimizerState {
            cfg,
            velocities,
            iteration: 0,
        })
    }

    /// Learning rate in effect for the given iteration.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = self
            .cfg
            .milestones
            .iter()
            .filter(|&&m| iteration >= m)
            .count();
        self.cfg.base_lr * 0.1f64.powi(drops as i32)
    }

    pub fn lr(&self) -> f64 {
        self.lr_at(self.iteration)
    }

    /// Applies one update from the gradients stored on the parameters and
    /// advances the iteration counter. Any non-finite gradient aborts before
    /// touching weights.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        if ids.len() != self.velocities.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.velocities.len(),
                ids.len()
            )));
        }
        for &id in &ids {
            let t = params.get(id);
            let g = t.grad.as_ref().ok_or_else(|| {
                Error::Numeric(format!("parameter {} has no gradient", params.name(id)))
            })?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {} at iteration {}",
                    params.name(id),
                    self.iteration
                )));
            }
        }
        let lr = self.lr();
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (k, &id) in ids.iter().enumerate() {
            let t = params.get_mut(id);
            let v = &mut self.velocities[k];
            let g = t.grad.as_ref().expect("checked above");
            for ((vi, wi), &gi) in v.iter_mut().zip(t.data.iter_mut()).zip(g.iter()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}
