use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    /// Smoothing constant of the squared-gradient average.
    pub alpha: f64,
    pub eps: f64,
}

impl RmsPropConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

/// RMSprop: `v <- a v + (1-a) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    square_avg: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        Ok(Self {
            config,
            square_avg: BTreeMap::new(),
        })
    }

    /// Updates every parameter of `params` that received a gradient in `grads`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let RmsPropConfig { lr, alpha, eps } = self.config;
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var) else { continue };
            // Gradients may carry their own graph (double backprop); never let
            // optimizer state keep it alive across iterations.
            let g = g.detach();
            let sq = g.sqr()?;
            let avg = match self.square_avg.get(name) {
                Some(prev) => ((prev * alpha)? + (sq * (1.0 - alpha))?)?,
                None => (sq * (1.0 - alpha))?,
            };
            let avg = avg.detach();
            let step = (&g / (avg.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (step * lr)?)?)?;
            self.square_avg.insert(name.clone(), avg);
        }
        Ok(())
    }

    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.square_avg
    }

    pub fn load_state(&mut self, state: BTreeMap<String, Tensor>) {
        self.square_avg = state;
    }
}
