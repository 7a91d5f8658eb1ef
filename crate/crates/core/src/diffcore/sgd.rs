use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, momentum: 0.9, weight_decay: 0.0005 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter, created lazily on the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Velocity(Vec<Vec<f64>>);

impl Velocity {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.0
    }
}

/// Classic momentum SGD with L2 weight decay folded into the gradient:
/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
///
/// Every parameter must carry a gradient; on error nothing is updated.
pub fn sgd_step(params: &mut [&mut Tensor], cfg: &SgdConfig, velocity: &mut Velocity) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(i));
    }
    if velocity.0.len() != params.len() {
        velocity.0 = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for (p, v) in params.iter_mut().zip(velocity.0.iter_mut()) {
        let grad = p.grad.take().expect("checked above");
        let lr = cfg.learning_rate;
        for ((theta, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vel = cfg.momentum * *vel + (g + cfg.weight_decay * *theta);
            *theta -= lr * *vel;
        }
    }
    Ok(())
}
