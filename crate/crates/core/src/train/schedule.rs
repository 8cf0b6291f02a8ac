use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Constant,
    Exponential,
}

/// Temperature settings as configured; the decay rate is derived from the
/// epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureConfig {
    pub decay: Decay,
    pub t0: f64,
    pub t_min: f64,
    /// Fraction of the epochs after which `t_min` is reached.
    pub reach: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig { decay: Decay::Exponential, t0: 1.0, t_min: 0.1, reach: 0.8 }
    }
}

impl TemperatureConfig {
    pub fn schedule(&self, epochs: usize) -> Result<TemperatureSchedule> {
        if !(self.reach > 0.0 && self.reach <= 1.0) {
            return Err(Error::Invalid(format!("temperature reach fraction must lie in (0, 1], got {}", self.reach)));
        }
        let span = (self.reach * epochs as f64).max(1.0);
        let gamma = match self.decay {
            Decay::Constant => 1.0,
            Decay::Exponential => (self.t_min / self.t0).powf(1.0 / span),
        };
        let s = TemperatureSchedule { decay: self.decay, t0: self.t0, t_min: self.t_min, gamma };
        s.validate()?;
        Ok(s)
    }
}

/// `T(e) = max(t_min, t0 * gamma^e)`, or `t0` throughout when constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub decay: Decay,
    pub t0: f64,
    pub t_min: f64,
    pub gamma: f64,
}

impl TemperatureSchedule {
    fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0) {
            return Err(Error::Invalid(format!("minimum temperature must be positive, got {}", self.t_min)));
        }
        if !(self.t0 >= self.t_min) {
            return Err(Error::Invalid(format!("initial temperature {} is below the minimum {}", self.t0, self.t_min)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Invalid(format!("temperature decay must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

pub fn anneal_temperature(epoch: usize, schedule: &TemperatureSchedule) -> Result<f64> {
    schedule.validate()?;
    Ok(match schedule.decay {
        Decay::Constant => schedule.t0,
        Decay::Exponential => (schedule.t0 * schedule.gamma.powf(epoch as f64)).max(schedule.t_min),
    })
}
