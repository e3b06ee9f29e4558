//! Learning-rate schedules and the first-order optimizers the averaging loop wraps.
//!
//! Step indices are 1-based throughout: `lr_at(1)` is the rate of the first update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    /// Constant at a deliberately large rate during the averaging stage.
    HighConstant,
    /// Linear anneal from `eta_max` towards `eta_min` within each cycle of `cycle_len`.
    Cyclical,
    LinearDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub eta_max: f64,
    pub eta_min: f64,
    pub cycle_len: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn constant(eta: f64, total_steps: u64) -> Result<Self> {
        Self::new(ScheduleKind::Constant, eta, eta, 1, total_steps)
    }

    pub fn high_constant(eta: f64, total_steps: u64) -> Result<Self> {
        Self::new(ScheduleKind::HighConstant, eta, eta, 1, total_steps)
    }

    pub fn cyclical(eta_max: f64, eta_min: f64, cycle_len: u64, total_steps: u64) -> Result<Self> {
        Self::new(ScheduleKind::Cyclical, eta_max, eta_min, cycle_len, total_steps)
    }

    pub fn linear_decay(eta_max: f64, total_steps: u64) -> Result<Self> {
        Self::new(ScheduleKind::LinearDecay, eta_max, 0.0, 1, total_steps)
    }

    pub fn new(kind: ScheduleKind, eta_max: f64, eta_min: f64, cycle_len: u64, total_steps: u64) -> Result<Self> {
        let s = Schedule {
            kind,
            eta_max,
            eta_min,
            cycle_len,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Same shape over a different step budget.
    pub fn with_total_steps(&self, total_steps: u64) -> Result<Self> {
        Self::new(self.kind, self.eta_max, self.eta_min, self.cycle_len, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_max >= 0.0 && self.eta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta_max must be finite and >= 0, got {}", self.eta_max)));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if self.kind == ScheduleKind::Cyclical {
            if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max) {
                return Err(Error::InvalidArgument(format!(
                    "cyclical schedule needs 0 <= eta_min <= eta_max, got {} and {}",
                    self.eta_min, self.eta_max
                )));
            }
            if self.cycle_len == 0 || self.cycle_len > self.total_steps {
                return Err(Error::InvalidArgument(format!(
                    "cycle length {} must be in 1..={}",
                    self.cycle_len, self.total_steps
                )));
            }
        }
        Ok(())
    }

    /// Learning rate of step `i`, `1 <= i <= total_steps`.
    ///
    /// Cyclical: `t = ((i - 1) mod K) + 1`, `eta = (1 - t/K) eta_max + (t/K) eta_min`, so
    /// every cycle ends exactly on `eta_min`. Equal endpoints give a constant rate.
    pub fn lr_at(&self, i: u64) -> Result<f64> {
        if i == 0 || i > self.total_steps {
            return Err(Error::InvalidArgument(format!("step {i} outside 1..={}", self.total_steps)));
        }
        Ok(match self.kind {
            ScheduleKind::Constant | ScheduleKind::HighConstant => self.eta_max,
            ScheduleKind::Cyclical => {
                if self.eta_max == self.eta_min {
                    return Ok(self.eta_max);
                }
                let k = self.cycle_len;
                let t = (i - 1) % k + 1;
                let frac = t as f64 / k as f64;
                (1.0 - frac) * self.eta_max + frac * self.eta_min
            }
            ScheduleKind::LinearDecay => self.eta_max * (1.0 - (i - 1) as f64 / self.total_steps as f64),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay `w <- w - eta * weight_decay * w`, applied before the gradient step.
    pub weight_decay: f64,
    /// Rescale the gradient to this global norm when it is exceeded.
    pub grad_clip: Option<f64>,
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }

    pub fn sgd_momentum(momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            momentum,
            ..Self::sgd()
        }
    }

    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight decay 0.01.
    pub fn adamw() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            weight_decay: 0.01,
            ..Self::sgd()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be in [0, 1), got {v}")))
            }
        };
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument("weight_decay must be finite and >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    /// Velocity (momentum) or first moment (AdamW).
    first: Option<ParamVector>,
    /// Second moment (AdamW).
    second: Option<ParamVector>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, like: &ParamVector) -> Result<Self> {
        config.validate()?;
        let (first, second) = match config.kind {
            OptimizerKind::Sgd => (None, None),
            OptimizerKind::SgdMomentum => (Some(like.zeros_like()), None),
            OptimizerKind::AdamW => (Some(like.zeros_like()), Some(like.zeros_like())),
        };
        Ok(OptimizerState {
            config,
            step: 0,
            first,
            second,
        })
    }

    pub fn first_moment(&self) -> Option<&ParamVector> {
        self.first.as_ref()
    }

    pub fn second_moment(&self) -> Option<&ParamVector> {
        self.second.as_ref()
    }

    /// Apply one update with learning rate `eta` and advance the step counter.
    pub fn step(&mut self, w: &mut ParamVector, g: &ParamVector, eta: f64) -> Result<()> {
        w.check_layout(g)?;
        if let Some(buf) = &self.first {
            w.check_layout(buf)?;
        }
        g.ensure_finite("gradient passed to optimizer")?;
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and >= 0, got {eta}")));
        }
        let clip = match self.config.grad_clip {
            Some(c) => {
                let n = g.norm2();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let cfg = self.config;
        self.step += 1;
        let wv = w.values_mut();
        if cfg.weight_decay > 0.0 {
            let decay = eta * cfg.weight_decay;
            for x in wv.iter_mut() {
                *x -= decay * *x;
            }
        }
        let gv = g.values();
        match cfg.kind {
            OptimizerKind::Sgd => {
                if clip == 1.0 {
                    for (x, gi) in wv.iter_mut().zip(gv) {
                        *x -= eta * gi;
                    }
                } else {
                    for (x, gi) in wv.iter_mut().zip(gv) {
                        *x -= eta * (gi * clip);
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                let v = self.first.as_mut().expect("velocity buffer").values_mut();
                for ((x, gi), vi) in wv.iter_mut().zip(gv).zip(v.iter_mut()) {
                    *vi = cfg.momentum * *vi + gi * clip;
                    *x -= eta * *vi;
                }
            }
            OptimizerKind::AdamW => {
                let m = self.first.as_mut().expect("first moment").values_mut();
                let v = self.second.as_mut().expect("second moment").values_mut();
                let t = self.step as i32;
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                for (((x, gi), mi), vi) in wv.iter_mut().zip(gv).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let gi = gi * clip;
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *x -= eta * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
        w.ensure_finite("weights after optimizer step")
    }
}
