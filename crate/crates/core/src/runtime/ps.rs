//! Parameter-server event loop.
//!
//! Lockstep protocols key their state by step: a round collects flag words
//! and pushes, aggregates once the expected pushers have all arrived, and
//! answers pulls with the result. SSP instead applies each pushed gradient on
//! receipt and holds back pulls that would exceed the staleness bound.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::endpoint::{Endpoint, TrafficStats};
use super::wire::{self, Envelope, Kind, NodeId, INIT_STEP};
use super::worker::Snapshot;
use super::RunPlan;
use crate::numeric::{init_params, FlatVector, ParamVector};
use crate::strategy::{fedavg_participants, mean_into, StrategyConfig, SyncFlags};
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SspStats {
    /// Largest `max(started) - min(started)` seen after any grant.
    pub max_spread: u64,
    /// Grants that left the spread above `s`; always zero unless the gate is broken.
    pub violations: u64,
    pub pushed: u64,
    pub applied: u64,
    /// Pulls that had to wait at the gate.
    pub deferred: u64,
    /// Highest step each worker was allowed to start.
    pub started: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub step: u64,
    pub pushers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PsOutput {
    pub global: ParamVector,
    pub rounds: Vec<RoundLog>,
    pub flag_rounds: u64,
    pub ssp: SspStats,
    /// SSP only: the global model every `N * eval_every` applied updates.
    pub snapshots: Vec<Snapshot>,
    pub relayed_shares: u64,
    pub stats: TrafficStats,
}

struct Round {
    flags: SyncFlags,
    flags_in: usize,
    pushes: Vec<Option<Vec<f64>>>,
    push_kind: Option<Kind>,
    expected: Option<Vec<usize>>,
    result: Option<Envelope>,
    pending_pulls: Vec<usize>,
    pulls_served: usize,
}

impl Round {
    fn new(workers: usize) -> Self {
        Round {
            flags: SyncFlags::new(workers),
            flags_in: 0,
            pushes: vec![None; workers],
            push_kind: None,
            expected: None,
            result: None,
            pending_pulls: Vec::new(),
            pulls_served: 0,
        }
    }
}

struct Ps<E> {
    ep: E,
    plan: Arc<RunPlan>,
    workers: usize,
    params: usize,
    flag_bytes: usize,
    global: ParamVector,
    rounds: BTreeMap<u64, Round>,
    log: Vec<RoundLog>,
    flag_rounds: u64,
    ssp: SspStats,
    gate_waiting: Vec<(usize, u64)>,
    finished: bool,
    snapshots: Vec<Snapshot>,
    relayed: u64,
}

impl<E: Endpoint> Ps<E> {
    fn send(&mut self, to: usize, kind: Kind, step: u64, payload: Vec<u8>) -> Result<()> {
        self.ep.send(NodeId::Worker(to), Envelope::new(kind, NodeId::Ps, step, payload))
    }

    fn expected_pushers(&self, step: u64) -> Vec<usize> {
        match self.plan.strategy {
            StrategyConfig::FedAvg { c, .. } => fedavg_participants(c, self.workers, self.plan.participants_seed, step),
            _ => (0..self.workers).collect(),
        }
    }

    fn round(&mut self, step: u64) -> &mut Round {
        let workers = self.workers;
        self.rounds.entry(step).or_insert_with(|| Round::new(workers))
    }

    fn on_flags(&mut self, n: usize, env: &Envelope) -> Result<()> {
        let bits = SyncFlags::from_bytes(self.workers, &env.payload)?;
        let workers = self.workers;
        let round = self.round(env.step);
        round.flags.merge(&bits);
        round.flags_in += 1;
        if round.flags_in > workers {
            return Err(Error::Protocol(format!("worker {n} sent a second flag word for step {}", env.step)));
        }
        if round.flags_in < workers {
            return Ok(());
        }
        let word = round.flags.as_bytes().to_vec();
        let any = round.flags.any();
        self.flag_rounds += 1;
        for w in 0..self.workers {
            self.send(w, Kind::FlagBits, env.step, word.clone())?;
        }
        if !any {
            self.rounds.remove(&env.step);
        }
        Ok(())
    }

    fn on_push(&mut self, n: usize, env: Envelope) -> Result<()> {
        let values = wire::decode_f64s(&env.payload)?;
        let step = env.step;
        let expected = self.expected_pushers(step);
        if expected.binary_search(&n).is_err() {
            return Err(Error::Protocol(format!("worker {n} is not a participant at step {step}")));
        }
        let round = self.round(step);
        if round.pushes[n].is_some() {
            return Err(Error::Protocol(format!("worker {n} pushed twice at step {step}")));
        }
        match round.push_kind {
            None => round.push_kind = Some(env.kind),
            Some(k) if k != env.kind => {
                return Err(Error::Protocol(format!("mixed {k:?} and {:?} at step {step}", env.kind)))
            }
            Some(_) => {}
        }
        round.pushes[n] = Some(values);
        round.expected = Some(expected);
        self.try_complete(step)
    }

    fn on_pull(&mut self, n: usize, step: u64) -> Result<()> {
        self.round(step).pending_pulls.push(n);
        self.try_complete(step)
    }

    fn try_complete(&mut self, step: u64) -> Result<()> {
        let Some(round) = self.rounds.get_mut(&step) else {
            return Ok(());
        };
        if round.result.is_none() {
            let Some(expected) = &round.expected else {
                return Ok(());
            };
            if expected.iter().any(|&w| round.pushes[w].is_none()) {
                return Ok(());
            }
            let mut mean: Vec<f64> = Vec::new();
            for (k, &w) in expected.iter().enumerate() {
                let x = round.pushes[w].take().expect("checked above");
                if k == 0 {
                    mean = x;
                } else {
                    mean_into(&mut mean, &x, k + 1);
                }
            }
            let kind = match round.push_kind {
                Some(Kind::PushGrad) => Kind::GlobalGrad,
                _ => Kind::GlobalParams,
            };
            let pushers = expected.clone();
            round.result = Some(Envelope::new(kind, NodeId::Ps, step, wire::encode_f64s(&mean)));
            if kind == Kind::GlobalParams {
                self.global = ParamVector::new(mean, self.global.layout().clone())?;
            }
            self.log.push(RoundLog { step, pushers });
        }
        let round = self.rounds.get_mut(&step).expect("round exists");
        let reply = round.result.clone().expect("result computed");
        let pulls = std::mem::take(&mut round.pending_pulls);
        round.pulls_served += pulls.len();
        let done = round.pulls_served == self.workers;
        for w in pulls {
            self.ep.send(NodeId::Worker(w), reply.clone())?;
        }
        if done {
            self.rounds.remove(&step);
        }
        Ok(())
    }

    fn min_started(&self) -> u64 {
        self.ssp.started.iter().copied().min().unwrap_or(0)
    }

    fn gate_open(&self, n: usize, step: u64, s: u64) -> bool {
        let min = self
            .ssp
            .started
            .iter()
            .enumerate()
            .map(|(w, &v)| if w == n { step } else { v })
            .min()
            .unwrap_or(step);
        step - min <= s
    }

    fn grant(&mut self, n: usize, step: u64, s: u64) -> Result<()> {
        self.ssp.started[n] = self.ssp.started[n].max(step);
        let max = self.ssp.started.iter().copied().max().unwrap_or(0);
        let spread = max - self.min_started();
        self.ssp.max_spread = self.ssp.max_spread.max(spread);
        if spread > s {
            self.ssp.violations += 1;
        }
        let payload = wire::encode_f64s(self.global.values());
        self.send(n, Kind::GlobalParams, step, payload)
    }

    fn on_gated_pull(&mut self, n: usize, step: u64, s: u64) -> Result<()> {
        if self.finished {
            return self.send(n, Kind::Shutdown, step, Vec::new());
        }
        if self.gate_open(n, step, s) {
            self.grant(n, step, s)?;
            self.release_gate(s)
        } else {
            self.ssp.deferred += 1;
            self.gate_waiting.push((n, step));
            Ok(())
        }
    }

    fn release_gate(&mut self, s: u64) -> Result<()> {
        loop {
            self.gate_waiting.sort_unstable();
            let Some(i) = self.gate_waiting.iter().position(|&(n, step)| self.gate_open(n, step, s)) else {
                return Ok(());
            };
            let (n, step) = self.gate_waiting.remove(i);
            self.grant(n, step, s)?;
        }
    }

    fn on_async_push(&mut self, n: usize, env: Envelope) -> Result<()> {
        let grad = wire::decode_f64s(&env.payload)?;
        self.ssp.pushed += 1;
        let lr = self.plan.schedule.lr_at(env.step, env.step / self.plan.steps_per_epoch);
        for (w, g) in self.global.values_mut().iter_mut().zip(&grad) {
            *w -= lr * g;
        }
        if !self.global.is_finite() {
            return Err(Error::NonFinite("parameter server update"));
        }
        self.ssp.applied += 1;
        let per_eval = self.workers as u64 * self.plan.eval_every;
        if self.ssp.applied % per_eval == 0 {
            self.snapshots.push(Snapshot {
                step: self.ssp.applied / self.workers as u64 - 1,
                time: self.ep.now(),
                params: self.global.values().to_vec(),
            });
        }
        let min = self.min_started();
        self.send(n, Kind::IterationReport, env.step, wire::encode_u64(min))
    }

    fn on_shutdown(&mut self) -> Result<()> {
        if self.plan.strategy.is_async() && !self.finished {
            self.finished = true;
            for (n, step) in std::mem::take(&mut self.gate_waiting) {
                self.send(n, Kind::Shutdown, step, Vec::new())?;
            }
        }
        Ok(())
    }

    fn relay(&mut self, n: usize, env: Envelope) -> Result<()> {
        for w in (0..self.workers).filter(|&w| w != n) {
            self.ep.send(NodeId::Worker(w), env.clone())?;
        }
        self.relayed += 1;
        Ok(())
    }

    async fn run(mut self) -> Result<PsOutput> {
        let ssp_bound = match self.plan.strategy {
            StrategyConfig::Ssp { s } => Some(s),
            _ => None,
        };
        let mut shutdowns = 0;
        while shutdowns < self.workers {
            let env = self.ep.recv().await?;
            let n = env
                .sender
                .worker_index()
                .filter(|&n| n < self.workers)
                .ok_or_else(|| Error::Protocol(format!("frame from unknown sender {:?}", env.sender)))?;
            env.check_payload(self.params, self.flag_bytes)?;
            match (env.kind, ssp_bound) {
                (Kind::PullRequest, _) if env.step == INIT_STEP => {
                    let payload = wire::encode_f64s(self.global.values());
                    self.send(n, Kind::GlobalParams, INIT_STEP, payload)?;
                }
                (Kind::PullRequest, Some(s)) => self.on_gated_pull(n, env.step, s)?,
                (Kind::PullRequest, None) => self.on_pull(n, env.step)?,
                (Kind::PushGrad, Some(_)) => self.on_async_push(n, env)?,
                (Kind::PushGrad | Kind::PushParams, None) => self.on_push(n, env)?,
                (Kind::FlagBits, None) => self.on_flags(n, &env)?,
                (Kind::DataShare, _) => self.relay(n, env)?,
                (Kind::Shutdown, _) => {
                    shutdowns += 1;
                    self.on_shutdown()?;
                }
                (kind, _) => {
                    return Err(Error::Protocol(format!("unexpected {kind:?} from worker {n} at step {}", env.step)))
                }
            }
        }
        if let Some(step) = self.rounds.keys().next() {
            return Err(Error::Protocol(format!("run ended with step {step} still open")));
        }
        Ok(PsOutput {
            global: self.global,
            rounds: self.log,
            flag_rounds: self.flag_rounds,
            ssp: self.ssp,
            snapshots: self.snapshots,
            relayed_shares: self.relayed,
            stats: self.ep.stats().clone(),
        })
    }
}

pub async fn ps_main<E: Endpoint>(ep: E, plan: Arc<RunPlan>) -> Result<PsOutput> {
    let global = init_params(&plan.spec)?;
    let workers = plan.workers;
    let ps = Ps {
        ep,
        workers,
        params: plan.spec.param_count(),
        flag_bytes: SyncFlags::wire_len(workers),
        global,
        rounds: BTreeMap::new(),
        log: Vec::new(),
        flag_rounds: 0,
        ssp: SspStats {
            started: vec![0; workers],
            ..SspStats::default()
        },
        gate_waiting: Vec::new(),
        finished: false,
        snapshots: Vec::new(),
        relayed: 0,
        plan,
    };
    ps.run().await
}
