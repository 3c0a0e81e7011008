//! Single-threaded discrete-event transport.
//!
//! Every node is an async program polled by one scheduler loop. A node runs
//! until it awaits a message; the scheduler then picks the node with the
//! earliest ready time (its clock, or for a waiting node the arrival time of
//! its first queued frame), breaking ties with a seeded generator. Frames
//! carry `sender clock + latency` as their arrival time and queue in arrival
//! order, so each sender/receiver pair is FIFO.

use std::cell::RefCell;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::endpoint::{Endpoint, TrafficStats};
use super::wire::{Envelope, NodeId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Runnable,
    WaitingRecv,
    Done,
}

struct Queued {
    at: f64,
    frame: Vec<u8>,
}

struct NodeState {
    clock: f64,
    inbox: Vec<Queued>,
    delivered: Option<Vec<u8>>,
    status: Status,
}

/// One scheduling decision: which node ran, at what logical time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub node: NodeId,
    pub time: f64,
}

/// Network-wide counters kept independently of the endpoints' own.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTotals {
    pub bytes: u64,
    pub frames: u64,
}

struct SimState {
    nodes: Vec<NodeState>,
    latency: f64,
    totals: WireTotals,
}

fn slot(node: NodeId) -> usize {
    match node {
        NodeId::Ps => 0,
        NodeId::Worker(n) => n + 1,
    }
}

fn node_at(slot: usize) -> NodeId {
    if slot == 0 {
        NodeId::Ps
    } else {
        NodeId::Worker(slot - 1)
    }
}

pub struct SimEndpoint {
    node: NodeId,
    state: Rc<RefCell<SimState>>,
    stats: TrafficStats,
}

impl Endpoint for SimEndpoint {
    fn node(&self) -> NodeId {
        self.node
    }

    fn send(&mut self, to: NodeId, env: Envelope) -> Result<()> {
        let frame = env.encode()?;
        self.stats.record_send(&env);
        let mut st = self.state.borrow_mut();
        let at = st.nodes[slot(self.node)].clock + st.latency;
        st.totals.bytes += frame.len() as u64;
        st.totals.frames += 1;
        let inbox = &mut st
            .nodes
            .get_mut(slot(to))
            .ok_or_else(|| Error::Transport(format!("no such node {to:?}")))?
            .inbox;
        let pos = inbox.partition_point(|q| q.at <= at);
        inbox.insert(pos, Queued { at, frame });
        Ok(())
    }

    fn recv(&mut self) -> impl Future<Output = Result<Envelope>> {
        SimRecv { ep: self }
    }

    fn advance(&mut self, cost: f64) {
        self.state.borrow_mut().nodes[slot(self.node)].clock += cost;
    }

    fn now(&self) -> f64 {
        self.state.borrow().nodes[slot(self.node)].clock
    }

    fn stats(&self) -> &TrafficStats {
        &self.stats
    }
}

struct SimRecv<'a> {
    ep: &'a mut SimEndpoint,
}

impl Future for SimRecv<'_> {
    type Output = Result<Envelope>;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        let ep = &mut self.get_mut().ep;
        let frame = {
            let mut st = ep.state.borrow_mut();
            let node = &mut st.nodes[slot(ep.node)];
            match node.delivered.take() {
                Some(frame) => frame,
                None => {
                    node.status = Status::WaitingRecv;
                    return Poll::Pending;
                }
            }
        };
        let env = Envelope::decode(&frame);
        if let Ok(env) = &env {
            ep.stats.record_recv(env);
        }
        Poll::Ready(env)
    }
}

/// Output of a finished simulation.
pub struct SimRun<P, W> {
    pub ps: P,
    pub workers: Vec<W>,
    pub trace: Vec<TraceEvent>,
    pub totals: WireTotals,
}

enum Out<P, W> {
    Ps(P),
    Worker(usize, W),
}

type NodeFuture<'a, P, W> = Pin<Box<dyn Future<Output = Result<Out<P, W>>> + 'a>>;

pub struct Simulator {
    state: Rc<RefCell<SimState>>,
    workers: usize,
    rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(workers: usize, schedule_seed: u64, latency: f64) -> Self {
        let nodes = (0..=workers)
            .map(|_| NodeState {
                clock: 0.0,
                inbox: Vec::new(),
                delivered: None,
                status: Status::Runnable,
            })
            .collect();
        Simulator {
            state: Rc::new(RefCell::new(SimState {
                nodes,
                latency,
                totals: WireTotals::default(),
            })),
            workers,
            rng: ChaCha8Rng::seed_from_u64(schedule_seed),
        }
    }

    pub fn endpoint(&self, node: NodeId) -> SimEndpoint {
        SimEndpoint {
            node,
            state: self.state.clone(),
            stats: TrafficStats::default(),
        }
    }

    /// Runs the parameter server and every worker program to completion.
    pub fn run<'a, P, W, FP, FW>(mut self, ps: FP, workers: Vec<FW>) -> Result<SimRun<P, W>>
    where
        FP: Future<Output = Result<P>> + 'a,
        FW: Future<Output = Result<W>> + 'a,
        P: 'a,
        W: 'a,
    {
        assert_eq!(workers.len(), self.workers, "one program per worker");
        let mut futures: Vec<Option<NodeFuture<'a, P, W>>> = Vec::with_capacity(self.workers + 1);
        futures.push(Some(Box::pin(async move { ps.await.map(Out::Ps) })));
        for (n, w) in workers.into_iter().enumerate() {
            futures.push(Some(Box::pin(async move { w.await.map(|o| Out::Worker(n, o)) })));
        }

        let mut cx = Context::from_waker(Waker::noop());
        let mut trace = Vec::new();
        let mut ps_out = None;
        let mut worker_out: Vec<Option<W>> = (0..self.workers).map(|_| None).collect();
        let mut ties = Vec::new();
        loop {
            let chosen = {
                let mut st = self.state.borrow_mut();
                let mut best = f64::INFINITY;
                ties.clear();
                for (i, node) in st.nodes.iter().enumerate() {
                    let ready = match node.status {
                        Status::Done => continue,
                        Status::Runnable => node.clock,
                        Status::WaitingRecv => match node.inbox.first() {
                            Some(q) => node.clock.max(q.at),
                            None => continue,
                        },
                    };
                    if ready < best {
                        best = ready;
                        ties.clear();
                    }
                    if ready == best {
                        ties.push(i);
                    }
                }
                if ties.is_empty() {
                    if st.nodes.iter().all(|n| n.status == Status::Done) {
                        break;
                    }
                    let stuck: Vec<NodeId> = st
                        .nodes
                        .iter()
                        .enumerate()
                        .filter(|(_, n)| n.status != Status::Done)
                        .map(|(i, _)| node_at(i))
                        .collect();
                    return Err(Error::Protocol(format!("deadlock: {stuck:?} all wait on empty inboxes")));
                }
                let i = if ties.len() == 1 {
                    ties[0]
                } else {
                    ties[self.rng.random_range(0..ties.len())]
                };
                let node = &mut st.nodes[i];
                if node.status == Status::WaitingRecv {
                    let q = node.inbox.remove(0);
                    node.clock = best;
                    node.delivered = Some(q.frame);
                }
                node.status = Status::Runnable;
                trace.push(TraceEvent {
                    node: node_at(i),
                    time: best,
                });
                i
            };

            let fut = futures[chosen].as_mut().expect("finished nodes are never scheduled");
            match fut.as_mut().poll(&mut cx) {
                Poll::Pending => {}
                Poll::Ready(result) => {
                    futures[chosen] = None;
                    self.state.borrow_mut().nodes[chosen].status = Status::Done;
                    match result? {
                        Out::Ps(p) => ps_out = Some(p),
                        Out::Worker(n, w) => worker_out[n] = Some(w),
                    }
                }
            }
        }
        let totals = self.state.borrow().totals.clone();
        Ok(SimRun {
            ps: ps_out.expect("parameter server finished"),
            workers: worker_out.into_iter().map(|w| w.expect("worker finished")).collect(),
            trace,
            totals,
        })
    }
}
