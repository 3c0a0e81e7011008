//! Per-step worker drivers, one per protocol.

use serde::{Deserialize, Serialize};

use super::{fedavg_participants, AggMode, FedAvgSchedule};
use crate::numeric::{forward_backward, sgd_step, Batch, FlatVector, GradientVector};
use crate::runtime::wire::Kind;
use crate::runtime::{Endpoint, StepInput, WorkerCtx};
use crate::signal::{Decision, DeltaThreshold, GradSignal};
use crate::Result;

/// How a step's update reached the replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDecision {
    Sync,
    Local,
    /// SSP: applied by the parameter server without a barrier.
    Async,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub decision: StepDecision,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub ewma: f64,
    /// `None` before the signal is defined or when it is infinite.
    pub delta: Option<f64>,
    /// SSP only: the run ended before this step could start.
    pub stopped: bool,
}

struct Computed {
    loss: f64,
    grad: GradientVector,
    norm_sq: f64,
    ewma: f64,
    delta: Option<f64>,
}

fn compute<E: Endpoint>(ctx: &mut WorkerCtx<E>, batch: &Batch, signal: &mut GradSignal) -> Result<Computed> {
    let (loss, grad) = forward_backward(&ctx.params, batch, &ctx.spec)?;
    ctx.ep.advance(ctx.costs.compute);
    let norm_sq = grad.norm_sq();
    signal.observe(norm_sq)?;
    let delta = signal.relative_change().ok().filter(|d| d.is_finite());
    Ok(Computed {
        loss,
        grad,
        norm_sq,
        ewma: signal.ewma(),
        delta,
    })
}

fn outcome(c: &Computed, decision: StepDecision) -> StepOutcome {
    StepOutcome {
        decision,
        loss: c.loss,
        grad_norm_sq: c.norm_sq,
        ewma: c.ewma,
        delta: c.delta,
        stopped: false,
    }
}

/// One aggregation round: push, pull, and replace or update the replica.
async fn sync_round<E: Endpoint>(
    ctx: &mut WorkerCtx<E>,
    agg: AggMode,
    grad: &GradientVector,
    lr: f64,
    step: u64,
) -> Result<()> {
    match agg {
        AggMode::Parameter => {
            let values = ctx.params.values().to_vec();
            ctx.push_to_ps(Kind::PushParams, &values, step)?;
            ctx.params = ctx.pull_from_ps(step).await?;
        }
        AggMode::Gradient => {
            ctx.push_to_ps(Kind::PushGrad, grad.values(), step)?;
            let mean = ctx.pull_grad_from_ps(step).await?;
            ctx.params = sgd_step(&ctx.params, &mean, lr)?;
        }
    }
    ctx.ep.advance(ctx.costs.comm);
    ctx.note_sync(step);
    Ok(())
}

/// Every step is aggregated. GA averages gradients, PA averages the
/// locally updated parameters.
pub async fn bsp_step<E: Endpoint>(
    ctx: &mut WorkerCtx<E>,
    input: &StepInput,
    signal: &mut GradSignal,
    agg: AggMode,
) -> Result<StepOutcome> {
    let c = compute(ctx, &input.batch, signal)?;
    if agg == AggMode::Parameter {
        ctx.params = sgd_step(&ctx.params, &c.grad, input.lr)?;
    }
    sync_round(ctx, agg, &c.grad, input.lr, input.step).await?;
    Ok(outcome(&c, StepDecision::Sync))
}

/// Local SGD every step; on scheduled steps the participants push their
/// parameters and every worker pulls the new average.
pub async fn fedavg_step<E: Endpoint>(
    ctx: &mut WorkerCtx<E>,
    input: &StepInput,
    signal: &mut GradSignal,
    schedule: &FedAvgSchedule,
    fraction: f64,
    participants_seed: u64,
) -> Result<StepOutcome> {
    let c = compute(ctx, &input.batch, signal)?;
    ctx.params = sgd_step(&ctx.params, &c.grad, input.lr)?;
    if !schedule.is_sync_step(input.step) {
        return Ok(outcome(&c, StepDecision::Local));
    }
    let participants = fedavg_participants(fraction, ctx.workers, participants_seed, input.step);
    if participants.binary_search(&ctx.id).is_ok() {
        let values = ctx.params.values().to_vec();
        ctx.push_to_ps(Kind::PushParams, &values, input.step)?;
    }
    ctx.params = ctx.pull_from_ps(input.step).await?;
    ctx.ep.advance(ctx.costs.comm);
    ctx.note_sync(input.step);
    Ok(outcome(&c, StepDecision::Sync))
}

/// Stale-synchronous step. The pull doubles as the staleness gate: the
/// parameter server holds it back while this worker leads the slowest by
/// more than `s`.
pub async fn ssp_step<E: Endpoint>(
    ctx: &mut WorkerCtx<E>,
    input: &StepInput,
    signal: &mut GradSignal,
) -> Result<StepOutcome> {
    match ctx.gated_pull(input.step).await? {
        Some(global) => ctx.params = global,
        None => {
            return Ok(StepOutcome {
                decision: StepDecision::Async,
                loss: f64::NAN,
                grad_norm_sq: f64::NAN,
                ewma: signal.ewma(),
                delta: None,
                stopped: true,
            })
        }
    }
    let c = compute(ctx, &input.batch, signal)?;
    ctx.push_to_ps(Kind::PushGrad, c.grad.values(), input.step)?;
    ctx.await_ack(input.step).await?;
    ctx.ep.advance(ctx.costs.comm);
    Ok(outcome(&c, StepDecision::Async))
}

/// Selective synchronization: every worker raises its flag when its relative
/// gradient change reaches δ (or during warmup), flags are all-gathered, and
/// the whole cluster aggregates if any flag is set.
///
/// PA applies the local update before the flag exchange and averages the
/// results. GA holds the gradient back until the exchange: on a sync step the
/// mean gradient replaces it, otherwise it is applied locally.
pub async fn selsync_step<E: Endpoint>(
    ctx: &mut WorkerCtx<E>,
    input: &StepInput,
    signal: &mut GradSignal,
    threshold: DeltaThreshold,
    agg: AggMode,
) -> Result<StepOutcome> {
    let c = compute(ctx, &input.batch, signal)?;
    if agg == AggMode::Parameter {
        ctx.params = sgd_step(&ctx.params, &c.grad, input.lr)?;
    }
    let own = signal.decide(threshold) == Decision::Sync;
    let flags = ctx.allgather_flags(own, input.step).await?;
    if flags.any() {
        sync_round(ctx, agg, &c.grad, input.lr, input.step).await?;
        return Ok(outcome(&c, StepDecision::Sync));
    }
    if agg == AggMode::Gradient {
        ctx.params = sgd_step(&ctx.params, &c.grad, input.lr)?;
    }
    Ok(outcome(&c, StepDecision::Local))
}
