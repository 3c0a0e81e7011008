use std::future::Future;

use serde::{Deserialize, Serialize};

use super::wire::{Envelope, Kind, NodeId};
use crate::Result;

/// Frame and byte counters kept by each endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: [u64; 9],
    pub frames_received: [u64; 9],
    /// Payload bytes only, per kind.
    pub payload_sent: [u64; 9],
    pub payload_received: [u64; 9],
}

impl TrafficStats {
    pub fn record_send(&mut self, env: &Envelope) {
        let k = env.kind.index();
        self.bytes_sent += env.wire_len() as u64;
        self.frames_sent[k] += 1;
        self.payload_sent[k] += env.payload.len() as u64;
    }

    pub fn record_recv(&mut self, env: &Envelope) {
        let k = env.kind.index();
        self.bytes_received += env.wire_len() as u64;
        self.frames_received[k] += 1;
        self.payload_received[k] += env.payload.len() as u64;
    }

    pub fn sent_of(&self, kind: Kind) -> u64 {
        self.frames_sent[kind.index()]
    }

    pub fn received_of(&self, kind: Kind) -> u64 {
        self.frames_received[kind.index()]
    }
}

/// One node's view of the network.
///
/// Node programs are written once as async functions over this trait and run
/// unchanged on the simulator or over TCP.
pub trait Endpoint {
    fn node(&self) -> NodeId;

    fn send(&mut self, to: NodeId, env: Envelope) -> Result<()>;

    fn recv(&mut self) -> impl Future<Output = Result<Envelope>>;

    /// Charges `cost` units of logical time to this node.
    fn advance(&mut self, cost: f64);

    /// Logical clock.
    fn now(&self) -> f64;

    fn stats(&self) -> &TrafficStats;
}
