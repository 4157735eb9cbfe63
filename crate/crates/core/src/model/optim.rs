use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelGrads, ModelParams};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// `param -= lr * grad`
pub fn sgd_step<T: Real>(param: &mut [T], grad: &[T], lr: f64) {
    for (p, &g) in param.iter_mut().zip(grad) {
        *p = T::lit(p.as_f64() - lr * g.as_f64());
    }
}

/// Moment buffers for one tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update; `t` is the 1-based step count.
pub fn adam_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    moments: &mut AdamMoments,
    t: u64,
    config: &OptimizerConfig,
) {
    if moments.m.len() != param.len() {
        moments.m = vec![0.0; param.len()];
        moments.v = vec![0.0; param.len()];
    }
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        let g = g.as_f64();
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = T::lit(p.as_f64() - config.lr * m_hat / (v_hat.sqrt() + config.eps));
    }
}

/// Optimizer state for a whole model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    moments: Vec<AdamMoments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if config.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(Self {
            config,
            steps: 0,
            moments: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Fails without touching `params` if any gradient
    /// entry is non-finite.
    pub fn step<T: Real>(&mut self, params: &mut ModelParams<T>, grads: &ModelGrads<T>) -> Result<()> {
        let grad_tensors = grads.tensors();
        let names = params.tensor_names();
        if grad_tensors.len() != names.len() {
            return Err(Error::Logic("gradient does not match parameter layout".into()));
        }
        for (name, g) in names.iter().zip(&grad_tensors) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {name}")));
            }
        }
        self.steps += 1;
        let t = self.steps;
        let config = self.config;
        if self.moments.len() != grad_tensors.len() {
            self.moments = vec![AdamMoments::default(); grad_tensors.len()];
        }
        let mut decayed: Vec<T> = Vec::new();
        for ((param, grad), moments) in params
            .tensors_mut()
            .into_iter()
            .zip(grad_tensors)
            .zip(self.moments.iter_mut())
        {
            if param.len() != grad.len() {
                return Err(Error::Logic("gradient tensor length mismatch".into()));
            }
            let grad = if config.weight_decay > 0.0 {
                decayed.clear();
                decayed.extend(
                    grad.iter()
                        .zip(param.iter())
                        .map(|(&g, &p)| g + T::lit(config.weight_decay) * p),
                );
                &decayed[..]
            } else {
                grad
            };
            match config.kind {
                OptimizerKind::Sgd => sgd_step(param, grad, config.lr),
                OptimizerKind::Adam => adam_step(param, grad, moments, t, &config),
            }
        }
        Ok(())
    }
}
