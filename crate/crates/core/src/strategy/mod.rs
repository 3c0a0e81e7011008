//! Coordination protocols and the aggregation operator they share.

mod driver;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ceil_count;
use crate::numeric::FlatVector;
use crate::signal::{lambda_for_cluster, DeltaThreshold, GradSignal, DEFAULT_WARMUP};
use crate::{seed, Error, Result};

pub use driver::{bsp_step, fedavg_step, selsync_step, ssp_step, StepDecision, StepOutcome};

/// What a sync round aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AggMode {
    /// Mean gradient, applied by every worker to its own replica.
    #[serde(rename = "GA", alias = "ga")]
    Gradient,
    /// Mean of the locally updated parameters.
    #[default]
    #[serde(rename = "PA", alias = "pa")]
    Parameter,
}

fn default_warmup() -> u64 {
    DEFAULT_WARMUP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyConfig {
    Bsp {
        #[serde(default)]
        agg: AggMode,
    },
    #[serde(rename = "fedavg")]
    FedAvg {
        /// Fraction of workers averaged per round.
        #[serde(rename = "C", alias = "c")]
        c: f64,
        /// Synchronization factor; `round(1/E)` rounds per epoch.
        #[serde(rename = "E", alias = "e")]
        e: f64,
    },
    Ssp {
        s: u64,
    },
    #[serde(rename = "selsync")]
    SelSync {
        delta: f64,
        #[serde(default)]
        agg: AggMode,
        #[serde(default = "default_warmup")]
        warmup: u64,
        /// EWMA weight; defaults to `N/100` clamped.
        #[serde(default)]
        lambda: Option<f64>,
    },
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::Bsp { .. } => "bsp",
            StrategyConfig::FedAvg { .. } => "fedavg",
            StrategyConfig::Ssp { .. } => "ssp",
            StrategyConfig::SelSync { .. } => "selsync",
        }
    }

    pub fn is_async(&self) -> bool {
        matches!(self, StrategyConfig::Ssp { .. })
    }

    pub fn validate(&self, workers: usize, steps_per_epoch: u64) -> Result<()> {
        match *self {
            StrategyConfig::Bsp { .. } => Ok(()),
            StrategyConfig::FedAvg { c, e } => {
                if !(c > 0.0 && c <= 1.0) || !(e > 0.0 && e <= 1.0) {
                    return Err(Error::config(format!("FedAvg needs C and E in (0, 1], got C={c}, E={e}")));
                }
                FedAvgSchedule::new(e, steps_per_epoch).map(|_| ())?;
                if participant_count(c, workers) == 0 {
                    return Err(Error::config("FedAvg selects no participants"));
                }
                Ok(())
            }
            StrategyConfig::Ssp { s } => {
                if s == 0 {
                    return Err(Error::config("SSP staleness bound s must be positive"));
                }
                Ok(())
            }
            StrategyConfig::SelSync { delta, warmup, lambda, .. } => {
                DeltaThreshold::new(delta)?;
                GradSignal::new(lambda.unwrap_or_else(|| lambda_for_cluster(workers)), warmup).map(|_| ())
            }
        }
    }

    /// Steps that always synchronize regardless of the signal.
    pub fn warmup_steps(&self) -> u64 {
        match self {
            StrategyConfig::SelSync { warmup, .. } => *warmup,
            _ => 0,
        }
    }
}

/// One synchronization bit per worker; bit `n` lives in byte `n / 8` at
/// position `n % 8`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncFlags {
    workers: usize,
    bytes: Vec<u8>,
}

impl SyncFlags {
    pub fn wire_len(workers: usize) -> usize {
        workers.div_ceil(8)
    }

    pub fn new(workers: usize) -> Self {
        SyncFlags {
            workers,
            bytes: vec![0; Self::wire_len(workers)],
        }
    }

    pub fn from_bytes(workers: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::wire_len(workers) {
            return Err(Error::Protocol(format!(
                "flag word for {workers} workers needs {} bytes, got {}",
                Self::wire_len(workers),
                bytes.len()
            )));
        }
        let mut flags = SyncFlags {
            workers,
            bytes: bytes.to_vec(),
        };
        // bits past N carry nothing
        if workers % 8 != 0 {
            let last = flags.bytes.len() - 1;
            flags.bytes[last] &= (1u8 << (workers % 8)) - 1;
        }
        Ok(flags)
    }

    pub fn set(&mut self, worker: usize, on: bool) {
        assert!(worker < self.workers, "worker {worker} outside flag word of {}", self.workers);
        let mask = 1u8 << (worker % 8);
        if on {
            self.bytes[worker / 8] |= mask;
        } else {
            self.bytes[worker / 8] &= !mask;
        }
    }

    pub fn get(&self, worker: usize) -> bool {
        self.bytes[worker / 8] & (1u8 << (worker % 8)) != 0
    }

    pub fn merge(&mut self, other: &SyncFlags) {
        for (a, b) in self.bytes.iter_mut().zip(&other.bytes) {
            *a |= b;
        }
    }

    pub fn any(&self) -> bool {
        self.bytes.iter().any(|&b| b != 0)
    }

    pub fn count(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn workers(&self) -> usize {
        self.workers
    }
}

/// Elementwise mean, accumulated in input order as a running mean so that
/// identical inputs reproduce themselves bit for bit.
pub fn aggregate_mean<T: FlatVector>(vectors: &[T]) -> Result<T> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::config("aggregate_mean needs at least one vector"))?;
    for v in &vectors[1..] {
        first.check_same_layout(v)?;
    }
    let mut mean = first.values().to_vec();
    for (k, v) in vectors.iter().enumerate().skip(1) {
        let k = (k + 1) as f64;
        for (m, x) in mean.iter_mut().zip(v.values()) {
            *m += (x - *m) / k;
        }
    }
    T::from_parts(mean, first.layout().clone())
}

/// Same running mean over raw slices, for the parameter server.
pub(crate) fn mean_into(acc: &mut [f64], x: &[f64], count: usize) {
    let k = count as f64;
    for (m, v) in acc.iter_mut().zip(x) {
        *m += (v - *m) / k;
    }
}

/// `x = round(1/E)` averaging rounds per epoch, spread uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FedAvgSchedule {
    rounds_per_epoch: u64,
    steps_per_epoch: u64,
}

impl FedAvgSchedule {
    pub fn new(e: f64, steps_per_epoch: u64) -> Result<Self> {
        if !(e > 0.0 && e <= 1.0) || steps_per_epoch == 0 {
            return Err(Error::config("FedAvg schedule needs E in (0, 1] and a positive epoch length"));
        }
        let rounds_per_epoch = (1.0 / e).round() as u64;
        if rounds_per_epoch > steps_per_epoch {
            return Err(Error::config(format!(
                "E={e} asks for {rounds_per_epoch} rounds in a {steps_per_epoch}-step epoch"
            )));
        }
        Ok(FedAvgSchedule {
            rounds_per_epoch,
            steps_per_epoch,
        })
    }

    pub fn rounds_per_epoch(&self) -> u64 {
        self.rounds_per_epoch
    }

    /// Whether the (0-based) global step ends with an averaging round.
    pub fn is_sync_step(&self, step: u64) -> bool {
        let (x, spe) = (self.rounds_per_epoch, self.steps_per_epoch);
        let j = step % spe + 1;
        j * x / spe != (j - 1) * x / spe
    }
}

pub fn participant_count(c: f64, workers: usize) -> usize {
    ceil_count(c * workers as f64).min(workers)
}

/// Sorted participant ids for the round ending at `step`.
pub fn fedavg_participants(c: f64, workers: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[step]));
    let mut ids = index::sample(&mut rng, workers, participant_count(c, workers)).into_vec();
    ids.sort_unstable();
    ids
}
