//! Parameter server, workers, and the two transports they run on.

mod endpoint;
mod ps;
pub mod sim;
pub mod socket;
pub mod wire;
mod worker;

use std::net::TcpListener;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, InjectionConfig};
use crate::numeric::{LrSchedule, ModelSpec};
use crate::strategy::StrategyConfig;
use crate::{Error, Result};

pub use endpoint::{Endpoint, TrafficStats};
pub use ps::{ps_main, PsOutput, RoundLog, SspStats};
pub use sim::{SimEndpoint, Simulator, TraceEvent, WireTotals};
pub use wire::{Envelope, Kind, NodeId};
pub use worker::{param_digest, worker_main, Snapshot, StepCosts, StepInput, WorkerCtx, WorkerOutput, WorkerSetup};

fn default_ps_address() -> String {
    "127.0.0.1:0".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransportConfig {
    DeterministicSim {
        #[serde(default)]
        schedule_seed: u64,
        /// Fixed delay added to every message.
        #[serde(default)]
        latency: f64,
    },
    Sockets {
        #[serde(default = "default_ps_address")]
        ps_address: String,
        #[serde(default)]
        base_port: u16,
    },
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig::DeterministicSim {
            schedule_seed: 0,
            latency: 0.0,
        }
    }
}

/// Multiplies one worker's compute cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowWorker {
    pub worker: usize,
    pub factor: f64,
}

fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    #[serde(rename = "N", alias = "workers")]
    pub workers: usize,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default = "default_timeout")]
    pub step_timeout_secs: f64,
    #[serde(default)]
    pub slow_workers: Vec<SlowWorker>,
}

impl ClusterConfig {
    pub fn sim(workers: usize, schedule_seed: u64) -> Self {
        ClusterConfig {
            workers,
            transport: TransportConfig::DeterministicSim {
                schedule_seed,
                latency: 0.0,
            },
            step_timeout_secs: default_timeout(),
            slow_workers: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("cluster needs at least one worker"));
        }
        if self.workers >= u16::MAX as usize {
            return Err(Error::config("too many workers for the wire format"));
        }
        if !(self.step_timeout_secs > 0.0) {
            return Err(Error::config("step timeout must be positive"));
        }
        if let TransportConfig::DeterministicSim { latency, .. } = self.transport {
            if !(latency >= 0.0 && latency.is_finite()) {
                return Err(Error::config("latency must be finite and >= 0"));
            }
        }
        for s in &self.slow_workers {
            if s.worker >= self.workers || !(s.factor > 0.0 && s.factor.is_finite()) {
                return Err(Error::config(format!("bad slow worker entry {s:?}")));
            }
        }
        Ok(())
    }

    pub fn slowdown(&self, worker: usize) -> f64 {
        self.slow_workers
            .iter()
            .filter(|s| s.worker == worker)
            .map(|s| s.factor)
            .product()
    }
}

/// Logical time charged per step: `compute` always, `comm` after an aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(default = "CostModel::default_compute")]
    pub compute: f64,
    #[serde(default = "CostModel::default_comm")]
    pub comm: f64,
}

impl CostModel {
    fn default_compute() -> f64 {
        1.0
    }

    fn default_comm() -> f64 {
        5.0
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            compute: 1.0,
            comm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSetup {
    pub config: InjectionConfig,
    pub seed: u64,
}

/// Everything the nodes need besides their data streams.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub workers: usize,
    pub strategy: StrategyConfig,
    pub spec: ModelSpec,
    pub schedule: LrSchedule,
    pub steps: u64,
    pub steps_per_epoch: u64,
    /// Per-worker batch before injection (`b'` when injecting).
    pub batch: usize,
    pub injection: Option<InjectionSetup>,
    pub participants_seed: u64,
    pub eval_every: u64,
    pub costs: CostModel,
    pub record_trajectory: bool,
}

pub struct RunHandle {
    pub workers: Vec<WorkerOutput>,
    pub ps: PsOutput,
    /// Scheduling decisions (simulator only).
    pub trace: Vec<TraceEvent>,
    /// Transport-level byte and frame totals, counted apart from the endpoints.
    pub wire: WireTotals,
}

/// Runs one training job to completion: the PS initializes the model, every
/// worker pulls it before step 0, and the strategy drives each step.
pub fn start_cluster(cluster: &ClusterConfig, plan: RunPlan, streams: Vec<BatchStream>) -> Result<RunHandle> {
    cluster.validate()?;
    plan.spec.validate()?;
    plan.schedule.validate()?;
    plan.strategy.validate(cluster.workers, plan.steps_per_epoch)?;
    if plan.workers != cluster.workers || streams.len() != cluster.workers {
        return Err(Error::config(format!(
            "{} workers configured, plan has {}, {} data streams supplied",
            cluster.workers,
            plan.workers,
            streams.len()
        )));
    }
    if plan.batch == 0 || plan.eval_every == 0 || plan.steps_per_epoch == 0 {
        return Err(Error::config("batch, eval_every and steps_per_epoch must be positive"));
    }
    if plan.injection.is_some() && plan.strategy.is_async() {
        return Err(Error::config("data injection needs a lockstep strategy"));
    }
    let plan = Arc::new(plan);
    let setups: Vec<WorkerSetup> = streams
        .into_iter()
        .enumerate()
        .map(|(n, stream)| WorkerSetup {
            plan: plan.clone(),
            stream,
            slowdown: cluster.slowdown(n),
        })
        .collect();
    match &cluster.transport {
        TransportConfig::DeterministicSim { schedule_seed, latency } => {
            let sim = Simulator::new(cluster.workers, *schedule_seed, *latency);
            let ps = ps_main(sim.endpoint(NodeId::Ps), plan.clone());
            let workers: Vec<_> = setups
                .into_iter()
                .enumerate()
                .map(|(n, setup)| worker_main(sim.endpoint(NodeId::Worker(n)), setup))
                .collect();
            let run = sim.run(ps, workers)?;
            Ok(RunHandle {
                workers: run.workers,
                ps: run.ps,
                trace: run.trace,
                wire: run.totals,
            })
        }
        TransportConfig::Sockets { ps_address, base_port } => {
            let addr = socket::resolve_addr(ps_address, *base_port)?;
            let listener = TcpListener::bind(addr)
                .map_err(|e| Error::Transport(format!("cannot bind {addr}: {e}")))?;
            let addr = listener.local_addr()?;
            let timeout = Duration::from_secs_f64(cluster.step_timeout_secs);
            let bytes = Arc::new(AtomicU64::new(0));
            let handles: Vec<_> = setups
                .into_iter()
                .enumerate()
                .map(|(n, setup)| {
                    let bytes = bytes.clone();
                    thread::Builder::new()
                        .name(format!("worker-{n}"))
                        .spawn(move || {
                            let ep = socket::WorkerSocket::connect(addr, n, timeout, bytes)?;
                            socket::block_on(worker_main(ep, setup))
                        })
                        .map_err(Error::Io)
                })
                .collect::<Result<_>>()?;
            let ps = socket::PsSocket::accept(&listener, cluster.workers, timeout, bytes.clone())
                .and_then(|ep| socket::block_on(ps_main(ep, plan.clone())));
            let mut workers = Vec::with_capacity(handles.len());
            let mut first_err = None;
            for h in handles {
                match h.join() {
                    Ok(Ok(w)) => workers.push(w),
                    Ok(Err(e)) => {
                        first_err.get_or_insert(e);
                    }
                    Err(_) => {
                        first_err.get_or_insert(Error::Transport("worker thread panicked".into()));
                    }
                }
            }
            let ps = ps?;
            if let Some(e) = first_err {
                return Err(e);
            }
            let total = bytes.load(Ordering::Relaxed);
            let frames = workers.iter().map(|w| w.stats.frames_sent.iter().sum::<u64>()).sum::<u64>()
                + ps.stats.frames_sent.iter().sum::<u64>();
            Ok(RunHandle {
                workers,
                ps,
                trace: Vec::new(),
                wire: WireTotals { bytes: total, frames },
            })
        }
    }
}
