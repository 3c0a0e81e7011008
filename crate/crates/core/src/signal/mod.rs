//! Streaming detector of critical updates.
//!
//! Each worker feeds the squared L2 norm of its flattened gradient into a
//! [`GradSignal`]. The signal keeps an EWMA of those values and exposes the
//! relative change between the two most recent smoothed values:
//!
//! ```text
//! Δ(g_i) = |(ewma_i - ewma_{i-1}) / ewma_{i-1}|
//! ```
//!
//! [`GradSignal::decide`] compares Δ against a threshold δ. During the first
//! `warmup` observations every step synchronizes.

mod hessian;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use hessian::{hessian_top_eigenvalue, power_iteration, HVP_EPS};

/// Window (in steps) during which decisions are forced to `Sync`.
pub const DEFAULT_WARMUP: u64 = 25;

/// Per-step outcome of the threshold rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Sync,
    Local,
}

/// Threshold δ on the relative gradient change. δ = 0 synchronizes on every step.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct DeltaThreshold(f64);

impl DeltaThreshold {
    pub fn new(delta: f64) -> Result<Self> {
        if delta.is_nan() || delta < 0.0 {
            return Err(Error::config(format!("delta must be >= 0, got {delta}")));
        }
        Ok(DeltaThreshold(delta))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// EWMA smoothing factor for a cluster of `workers` nodes: `N/100`, clamped to
/// `[0.01, 1.0]`. A single worker uses 0.05.
pub fn lambda_for_cluster(workers: usize) -> f64 {
    if workers <= 1 {
        0.05
    } else {
        (workers as f64 / 100.0).clamp(0.01, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSignal {
    lambda: f64,
    warmup: u64,
    step_count: u64,
    ewma_current: f64,
    ewma_previous: f64,
    max_delta_seen: f64,
}

impl GradSignal {
    pub fn new(lambda: f64, warmup: u64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::config(format!("EWMA lambda must lie in (0, 1], got {lambda}")));
        }
        if warmup == 0 {
            return Err(Error::config("warmup must be a positive number of steps"));
        }
        Ok(GradSignal {
            lambda,
            warmup,
            step_count: 0,
            ewma_current: 0.0,
            ewma_previous: 0.0,
            max_delta_seen: 0.0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn warmup(&self) -> u64 {
        self.warmup
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn ewma(&self) -> f64 {
        self.ewma_current
    }

    pub fn ewma_previous(&self) -> f64 {
        self.ewma_previous
    }

    /// Running maximum 𝓜 of Δ over post-warmup observations.
    pub fn max_delta_seen(&self) -> f64 {
        self.max_delta_seen
    }

    pub fn in_warmup(&self) -> bool {
        self.step_count <= self.warmup
    }

    /// Folds one squared gradient norm into the EWMA. On error the state is untouched.
    pub fn observe(&mut self, grad_norm_sq: f64) -> Result<()> {
        if !grad_norm_sq.is_finite() || grad_norm_sq < 0.0 {
            return Err(Error::Signal(format!(
                "squared gradient norm must be finite and >= 0, got {grad_norm_sq}"
            )));
        }
        self.ewma_previous = self.ewma_current;
        self.ewma_current = if self.step_count == 0 {
            grad_norm_sq
        } else {
            self.lambda * grad_norm_sq + (1.0 - self.lambda) * self.ewma_current
        };
        self.step_count += 1;
        if !self.in_warmup() {
            if let Ok(delta) = self.relative_change() {
                if delta.is_finite() {
                    self.max_delta_seen = self.max_delta_seen.max(delta);
                }
            }
        }
        Ok(())
    }

    /// Δ between the last two smoothed values. `0/0` is 0; `x/0` is `+∞`.
    pub fn relative_change(&self) -> Result<f64> {
        if self.step_count < 2 {
            return Err(Error::NotReady(self.step_count));
        }
        if self.ewma_previous == 0.0 {
            return Ok(if self.ewma_current == 0.0 { 0.0 } else { f64::INFINITY });
        }
        Ok(((self.ewma_current - self.ewma_previous) / self.ewma_previous).abs())
    }

    pub fn decide(&self, threshold: DeltaThreshold) -> Decision {
        if self.in_warmup() {
            return Decision::Sync;
        }
        match self.relative_change() {
            Ok(delta) if delta >= threshold.value() => Decision::Sync,
            Ok(_) => Decision::Local,
            Err(_) => Decision::Sync,
        }
    }
}

/// Replays a recorded Δ value through the threshold rule. Steps that were in
/// warmup, or whose Δ was not yet defined, always synchronize.
pub fn replay_decision(delta: Option<f64>, in_warmup: bool, threshold: DeltaThreshold) -> Decision {
    match delta {
        Some(d) if !in_warmup && d < threshold.value() => Decision::Local,
        _ => Decision::Sync,
    }
}
