//! First-order optimizers over flat parameter slices.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_dim, Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// One update of `params` in place. State is created lazily on the
    /// first call and must keep the same length afterwards.
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()>;

    fn steps_taken(&self) -> u64;
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

impl Optimizer for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        ensure_dim(params.len(), grads.len())?;
        if self.t == 0 {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        ensure_dim(self.m.len(), params.len())?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] *= decay;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Heavy-ball momentum with coupled L2 weight decay.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
    t: u64,
}

impl SgdMomentum {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            momentum: SGD_MOMENTUM,
            weight_decay,
            velocity: Vec::new(),
            t: 0,
        }
    }
}

impl Optimizer for SgdMomentum {
    fn name(&self) -> &'static str {
        "sgd-momentum"
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        ensure_dim(params.len(), grads.len())?;
        if self.t == 0 {
            self.velocity = vec![0.0; params.len()];
        }
        ensure_dim(self.velocity.len(), params.len())?;
        self.t += 1;
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            params[i] -= lr * self.velocity[i];
        }
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

impl OptimizerKind {
    pub fn build(self, weight_decay: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::SgdMomentum => Box::new(SgdMomentum::new(weight_decay)),
            OptimizerKind::AdamW => Box::new(AdamW::new(weight_decay)),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" => Ok(Self::SgdMomentum),
            "adamw" => Ok(Self::AdamW),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base_lr: f64, step: u64, total_steps: u64) -> f64 {
        match self {
            LrSchedule::Constant => base_lr,
            LrSchedule::Cosine => cosine_lr(base_lr, step, total_steps),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown schedule `{other}`"))),
        }
    }
}

/// `base_lr * (1 + cos(pi * step / total_steps)) / 2`
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}
