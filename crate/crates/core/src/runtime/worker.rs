use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::endpoint::{Endpoint, TrafficStats};
use super::wire::{self, Envelope, Kind, NodeId, INIT_STEP};
use super::RunPlan;
use crate::data::{donor_share, select_injection, BatchStream};
use crate::harness::MetricsRecord;
use crate::numeric::{Batch, FlatVector, GradientVector, ModelSpec, ParamVector};
use crate::signal::{lambda_for_cluster, DeltaThreshold, GradSignal};
use crate::strategy::{bsp_step, fedavg_step, selsync_step, ssp_step, FedAvgSchedule, StepDecision, StepOutcome, StrategyConfig, SyncFlags};
use crate::{Error, Result};

/// Logical cost charged per step by each worker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCosts {
    pub compute: f64,
    pub comm: f64,
}

pub struct StepInput {
    pub step: u64,
    pub batch: Batch,
    pub lr: f64,
}

/// A worker's replica plus its connection to the parameter server.
pub struct WorkerCtx<E> {
    pub ep: E,
    pub id: usize,
    pub workers: usize,
    pub params: ParamVector,
    pub spec: ModelSpec,
    pub costs: StepCosts,
    stash: Vec<Envelope>,
    sync_digests: Vec<(u64, u64)>,
}

/// FNV-1a over the parameter bit patterns.
pub fn param_digest(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl<E: Endpoint> WorkerCtx<E> {
    pub fn new(ep: E, workers: usize, spec: ModelSpec, costs: StepCosts) -> Result<Self> {
        let id = ep
            .node()
            .worker_index()
            .ok_or_else(|| Error::config("worker context needs a worker endpoint"))?;
        let params = ParamVector::zeros(spec.layout());
        Ok(WorkerCtx {
            ep,
            id,
            workers,
            params,
            spec,
            costs,
            stash: Vec::new(),
            sync_digests: Vec::new(),
        })
    }

    fn me(&self) -> NodeId {
        NodeId::Worker(self.id)
    }

    fn send_ps(&mut self, kind: Kind, step: u64, payload: Vec<u8>) -> Result<()> {
        let env = Envelope::new(kind, self.me(), step, payload);
        self.ep.send(NodeId::Ps, env)
    }

    /// Next frame satisfying `want`; anything else that arrives first is
    /// stashed for a later call.
    async fn recv_where(&mut self, want: impl Fn(&Envelope) -> bool) -> Result<Envelope> {
        if let Some(i) = self.stash.iter().position(&want) {
            return Ok(self.stash.remove(i));
        }
        loop {
            let env = self.ep.recv().await?;
            if want(&env) {
                return Ok(env);
            }
            self.stash.push(env);
        }
    }

    fn decode_params(&self, env: &Envelope) -> Result<Vec<f64>> {
        env.check_payload(self.spec.param_count(), SyncFlags::wire_len(self.workers))?;
        wire::decode_f64s(&env.payload)
    }

    /// Initial model, pulled before step 0.
    pub async fn pull_initial(&mut self) -> Result<()> {
        self.send_ps(Kind::PullRequest, INIT_STEP, Vec::new())?;
        let env = self
            .recv_where(|e| e.kind == Kind::GlobalParams && e.step == INIT_STEP)
            .await?;
        self.params = ParamVector::new(self.decode_params(&env)?, self.spec.layout())?;
        Ok(())
    }

    /// Gather-then-broadcast through the parameter server. Sends and receives
    /// exactly one flag word of `ceil(N/8)` bytes.
    pub async fn allgather_flags(&mut self, own: bool, step: u64) -> Result<SyncFlags> {
        let mut flags = SyncFlags::new(self.workers);
        flags.set(self.id, own);
        self.send_ps(Kind::FlagBits, step, flags.as_bytes().to_vec())?;
        let env = self.recv_where(|e| e.kind == Kind::FlagBits && e.step == step).await?;
        SyncFlags::from_bytes(self.workers, &env.payload)
    }

    pub fn push_to_ps(&mut self, kind: Kind, values: &[f64], step: u64) -> Result<()> {
        if !matches!(kind, Kind::PushParams | Kind::PushGrad) {
            return Err(Error::Protocol(format!("{kind:?} is not a push")));
        }
        self.send_ps(kind, step, wire::encode_f64s(values))
    }

    /// Global parameters after the step's aggregation.
    pub async fn pull_from_ps(&mut self, step: u64) -> Result<ParamVector> {
        self.send_ps(Kind::PullRequest, step, Vec::new())?;
        let env = self.recv_where(|e| e.kind == Kind::GlobalParams && e.step == step).await?;
        ParamVector::new(self.decode_params(&env)?, self.spec.layout())
    }

    /// Mean gradient of a gradient-aggregation round.
    pub async fn pull_grad_from_ps(&mut self, step: u64) -> Result<GradientVector> {
        self.send_ps(Kind::PullRequest, step, Vec::new())?;
        let env = self.recv_where(|e| e.kind == Kind::GlobalGrad && e.step == step).await?;
        GradientVector::new(self.decode_params(&env)?, self.spec.layout())
    }

    /// SSP pull. `None` once the parameter server has ended the run.
    pub async fn gated_pull(&mut self, step: u64) -> Result<Option<ParamVector>> {
        self.send_ps(Kind::PullRequest, step, Vec::new())?;
        let env = self
            .recv_where(|e| e.step == step && matches!(e.kind, Kind::GlobalParams | Kind::Shutdown))
            .await?;
        if env.kind == Kind::Shutdown {
            return Ok(None);
        }
        ParamVector::new(self.decode_params(&env)?, self.spec.layout()).map(Some)
    }

    /// SSP push acknowledgement; returns the PS's minimum started step.
    pub async fn await_ack(&mut self, step: u64) -> Result<u64> {
        let env = self
            .recv_where(|e| e.kind == Kind::IterationReport && e.step == step)
            .await?;
        wire::decode_u64(&env.payload)
    }

    /// Runs this worker's side of a data-injection round.
    async fn inject(&mut self, batch: Batch, plan: &RunPlan, step: u64) -> Result<Batch> {
        let Some(inj) = &plan.injection else {
            return Ok(batch);
        };
        let sel = select_injection(&inj.config, self.workers, batch.len(), inj.seed, step);
        if let Some(rows) = sel.is_donor(self.id) {
            let share = donor_share(&batch, rows)?;
            self.send_ps(Kind::DataShare, step, wire::encode_share(&share))?;
        }
        let mut shares = Vec::new();
        let me = self.id;
        for &d in sel.donors.iter().filter(|&&d| d != me) {
            let env = self
                .recv_where(|e| e.kind == Kind::DataShare && e.step == step && e.sender == NodeId::Worker(d))
                .await?;
            shares.push(wire::decode_share(&env.payload, d)?);
        }
        let mut out = batch;
        for share in &shares {
            out.extend_from(share);
        }
        Ok(out)
    }

    pub(crate) fn note_sync(&mut self, step: u64) {
        self.sync_digests.push((step, param_digest(self.params.values())));
    }
}

/// Replica parameters captured at an evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    /// Logical time at the end of the step.
    pub time: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WorkerOutput {
    pub id: usize,
    pub records: Vec<MetricsRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Parameters after every step, when the plan asks for them.
    pub trajectory: Vec<Vec<f64>>,
    pub initial_params: Vec<f64>,
    pub final_params: ParamVector,
    /// `(step, digest)` right after each aggregation round.
    pub sync_digests: Vec<(u64, u64)>,
    pub stats: TrafficStats,
    pub clock: f64,
}

pub struct WorkerSetup {
    pub plan: Arc<RunPlan>,
    pub stream: BatchStream,
    pub slowdown: f64,
}

fn is_eval_step(step: u64, every: u64, last: u64) -> bool {
    (step + 1) % every == 0 || step == last
}

pub async fn worker_main<E: Endpoint>(ep: E, setup: WorkerSetup) -> Result<WorkerOutput> {
    let WorkerSetup { plan, mut stream, slowdown } = setup;
    let costs = StepCosts {
        compute: plan.costs.compute * slowdown,
        comm: plan.costs.comm,
    };
    let mut ctx = WorkerCtx::new(ep, plan.workers, plan.spec.clone(), costs)?;
    ctx.pull_initial().await?;
    let initial_params = ctx.params.values().to_vec();

    let (lambda, warmup) = match plan.strategy {
        StrategyConfig::SelSync { lambda, warmup, .. } => (lambda.unwrap_or_else(|| lambda_for_cluster(plan.workers)), warmup),
        _ => (lambda_for_cluster(plan.workers), 1),
    };
    let mut signal = GradSignal::new(lambda, warmup)?;
    let fedavg = match plan.strategy {
        StrategyConfig::FedAvg { e, .. } => Some(FedAvgSchedule::new(e, plan.steps_per_epoch)?),
        _ => None,
    };

    let mut records = Vec::with_capacity(plan.steps as usize);
    let mut snapshots = Vec::new();
    let mut trajectory = Vec::new();
    let mut last_sent = 0;
    let mut last_received = 0;
    let last_step = plan.steps.saturating_sub(1);
    for step in 0..plan.steps {
        let started = ctx.ep.now();
        let batch = stream.next_batch(plan.batch)?;
        let batch = ctx.inject(batch, &plan, step).await?;
        let lr = plan.schedule.lr_at(step, step / plan.steps_per_epoch);
        let input = StepInput { step, batch, lr };
        let out: StepOutcome = match plan.strategy {
            StrategyConfig::Bsp { agg } => bsp_step(&mut ctx, &input, &mut signal, agg).await?,
            StrategyConfig::FedAvg { c, .. } => {
                let sched = fedavg.as_ref().expect("schedule built for FedAvg");
                fedavg_step(&mut ctx, &input, &mut signal, sched, c, plan.participants_seed).await?
            }
            StrategyConfig::Ssp { .. } => ssp_step(&mut ctx, &input, &mut signal).await?,
            StrategyConfig::SelSync { delta, agg, .. } => {
                selsync_step(&mut ctx, &input, &mut signal, DeltaThreshold::new(delta)?, agg).await?
            }
        };
        if out.stopped {
            break;
        }
        let stats = ctx.ep.stats();
        records.push(MetricsRecord {
            step,
            worker_id: ctx.id,
            loss: out.loss,
            grad_norm_sq: out.grad_norm_sq,
            ewma: out.ewma,
            delta_g: out.delta,
            decision: out.decision,
            bytes_sent: stats.bytes_sent - last_sent,
            bytes_received: stats.bytes_received - last_received,
            step_duration: ctx.ep.now() - started,
            lr,
        });
        last_sent = stats.bytes_sent;
        last_received = stats.bytes_received;
        if plan.record_trajectory {
            trajectory.push(ctx.params.values().to_vec());
        }
        if out.decision != StepDecision::Async && is_eval_step(step, plan.eval_every, last_step) {
            snapshots.push(Snapshot {
                step,
                time: ctx.ep.now(),
                params: ctx.params.values().to_vec(),
            });
        }
    }

    let final_step = records.last().map_or(0, |r| r.step);
    ctx.send_ps(Kind::Shutdown, final_step, Vec::new())?;
    let stats = ctx.ep.stats().clone();
    if let Some(last) = records.last_mut() {
        last.bytes_sent += stats.bytes_sent - last_sent;
        last.bytes_received += stats.bytes_received - last_received;
    }
    Ok(WorkerOutput {
        id: ctx.id,
        records,
        snapshots,
        trajectory,
        initial_params,
        clock: ctx.ep.now(),
        final_params: ctx.params,
        sync_digests: ctx.sync_digests,
        stats,
    })
}
