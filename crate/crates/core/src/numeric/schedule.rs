use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    PerStep,
    #[default]
    PerEpoch,
}

/// Multiply the rate by `factor` each time another `every` units have passed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodicDecay {
    pub every: u64,
    pub factor: f64,
}

/// Piecewise-constant learning rate.
///
/// Milestones are `(boundary, factor)` pairs; a boundary counts as passed once
/// the step (or epoch, depending on `mode`) reaches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    #[serde(default)]
    pub milestones: Vec<(u64, f64)>,
    #[serde(default)]
    pub periodic: Option<PeriodicDecay>,
    #[serde(default)]
    pub mode: ScheduleMode,
}

impl LrSchedule {
    pub fn constant(initial_lr: f64) -> Self {
        LrSchedule {
            initial_lr,
            milestones: Vec::new(),
            periodic: None,
            mode: ScheduleMode::PerStep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::config("initial_lr must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::config("lr milestones must be strictly increasing"));
        }
        if self.milestones.iter().any(|&(_, f)| !(f.is_finite() && f > 0.0)) {
            return Err(Error::config("lr milestone factors must be positive"));
        }
        if let Some(p) = self.periodic {
            if p.every == 0 || !(p.factor.is_finite() && p.factor > 0.0) {
                return Err(Error::config("periodic decay needs every > 0 and a positive factor"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64, epoch: u64) -> f64 {
        let position = match self.mode {
            ScheduleMode::PerStep => step,
            ScheduleMode::PerEpoch => epoch,
        };
        let mut lr = self.initial_lr;
        for &(boundary, factor) in &self.milestones {
            if position >= boundary {
                lr *= factor;
            }
        }
        if let Some(p) = self.periodic {
            lr *= p.factor.powi((position / p.every) as i32);
        }
        lr
    }
}
