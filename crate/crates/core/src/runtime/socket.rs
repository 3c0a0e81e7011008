//! TCP transport: one thread per node, star topology around the parameter server.

use std::collections::VecDeque;
use std::future::{self, Future};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::pin::pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::task::{Context, Poll, Waker};
use std::thread;
use std::time::{Duration, Instant};

use super::endpoint::{Endpoint, TrafficStats};
use super::wire::{Envelope, NodeId};
use crate::{Error, Result};

/// Environment variable that overrides the configured parameter-server address.
pub const PS_ADDR_ENV: &str = "SELSYNC_PS_ADDR";

/// Drives a future on the current thread. Socket endpoints resolve every
/// `recv` synchronously, so this never spins for long.
pub fn block_on<F: Future>(fut: F) -> F::Output {
    let mut fut = pin!(fut);
    let mut cx = Context::from_waker(Waker::noop());
    loop {
        if let Poll::Ready(v) = fut.as_mut().poll(&mut cx) {
            return v;
        }
        thread::yield_now();
    }
}

/// Resolves the listen address: env override first, then `address`, with
/// `base_port` filling in a zero port.
pub fn resolve_addr(address: &str, base_port: u16) -> Result<SocketAddr> {
    let raw = std::env::var(PS_ADDR_ENV).unwrap_or_else(|_| address.to_string());
    let mut addr = raw
        .to_socket_addrs()
        .map_err(|e| Error::Transport(format!("bad address {raw:?}: {e}")))?
        .next()
        .ok_or_else(|| Error::Transport(format!("address {raw:?} resolved to nothing")))?;
    if addr.port() == 0 && base_port != 0 {
        addr.set_port(base_port);
    }
    Ok(addr)
}

fn timeout_error(e: io::Error, timeout: Duration, what: &'static str) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Timeout(timeout, what),
        _ => Error::Io(e),
    }
}

pub struct PsSocket {
    conns: Vec<TcpStream>,
    backlog: VecDeque<Envelope>,
    rx: Receiver<Result<Envelope>>,
    timeout: Duration,
    clock: f64,
    stats: TrafficStats,
    wire_bytes: Arc<AtomicU64>,
}

impl PsSocket {
    /// Accepts one connection per worker. A worker announces its index with
    /// the first frame it sends, which is queued for the PS program.
    pub fn accept(listener: &TcpListener, workers: usize, timeout: Duration, wire_bytes: Arc<AtomicU64>) -> Result<Self> {
        let (tx, rx) = mpsc::channel();
        let mut conns: Vec<Option<TcpStream>> = (0..workers).map(|_| None).collect();
        let mut backlog = Vec::with_capacity(workers);
        let deadline = Instant::now() + timeout;
        listener.set_nonblocking(true)?;
        for _ in 0..workers {
            let mut stream = loop {
                match listener.accept() {
                    Ok((stream, _)) => break stream,
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        if Instant::now() >= deadline {
                            return Err(Error::Timeout(timeout, "workers to connect"));
                        }
                        thread::sleep(Duration::from_millis(1));
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(Some(timeout))?;
            let first = Envelope::read_from(&mut stream)
                .map_err(|e| match e {
                    Error::Io(io) => timeout_error(io, timeout, "a worker's first frame"),
                    other => other,
                })?
                .ok_or_else(|| Error::Transport("worker closed before identifying itself".into()))?;
            let n = first
                .sender
                .worker_index()
                .filter(|&n| n < workers)
                .ok_or_else(|| Error::Protocol(format!("unexpected first sender {:?}", first.sender)))?;
            if conns[n].is_some() {
                return Err(Error::Protocol(format!("worker {n} connected twice")));
            }
            stream.set_read_timeout(None)?;
            let mut reader = stream.try_clone()?;
            let tx = tx.clone();
            thread::spawn(move || loop {
                match Envelope::read_from(&mut reader) {
                    Ok(Some(env)) => {
                        if tx.send(Ok(env)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            });
            conns[n] = Some(stream);
            backlog.push(first);
        }
        backlog.sort_by_key(|e| e.sender);
        Ok(PsSocket {
            conns: conns.into_iter().map(|c| c.expect("every worker connected")).collect(),
            backlog: backlog.into(),
            rx,
            timeout,
            clock: 0.0,
            stats: TrafficStats::default(),
            wire_bytes,
        })
    }

    fn recv_blocking(&mut self) -> Result<Envelope> {
        let env = match self.backlog.pop_front() {
            Some(env) => env,
            None => match self.rx.recv_timeout(self.timeout) {
                Ok(env) => env?,
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout, "a worker frame")),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Transport("all worker connections closed".into()))
                }
            },
        };
        self.stats.record_recv(&env);
        Ok(env)
    }
}

impl Endpoint for PsSocket {
    fn node(&self) -> NodeId {
        NodeId::Ps
    }

    fn send(&mut self, to: NodeId, env: Envelope) -> Result<()> {
        let n = to
            .worker_index()
            .ok_or_else(|| Error::Transport("the parameter server cannot send to itself".into()))?;
        let conn = self
            .conns
            .get_mut(n)
            .ok_or_else(|| Error::Transport(format!("no connection to worker {n}")))?;
        env.write_to(conn)?;
        self.wire_bytes.fetch_add(env.wire_len() as u64, Ordering::Relaxed);
        self.stats.record_send(&env);
        Ok(())
    }

    fn recv(&mut self) -> impl Future<Output = Result<Envelope>> {
        future::ready(self.recv_blocking())
    }

    fn advance(&mut self, cost: f64) {
        self.clock += cost;
    }

    fn now(&self) -> f64 {
        self.clock
    }

    fn stats(&self) -> &TrafficStats {
        &self.stats
    }
}

pub struct WorkerSocket {
    index: usize,
    stream: TcpStream,
    timeout: Duration,
    clock: f64,
    stats: TrafficStats,
    wire_bytes: Arc<AtomicU64>,
}

impl WorkerSocket {
    pub fn connect(addr: SocketAddr, index: usize, timeout: Duration, wire_bytes: Arc<AtomicU64>) -> Result<Self> {
        let stream = TcpStream::connect_timeout(&addr, timeout)
            .map_err(|e| Error::Transport(format!("worker {index} cannot reach {addr}: {e}")))?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        Ok(WorkerSocket {
            index,
            stream,
            timeout,
            clock: 0.0,
            stats: TrafficStats::default(),
            wire_bytes,
        })
    }

    fn recv_blocking(&mut self) -> Result<Envelope> {
        let env = Envelope::read_from(&mut self.stream)
            .map_err(|e| match e {
                Error::Io(io) => timeout_error(io, self.timeout, "the parameter server"),
                other => other,
            })?
            .ok_or_else(|| Error::Transport("parameter server closed the connection".into()))?;
        self.stats.record_recv(&env);
        Ok(env)
    }
}

impl Endpoint for WorkerSocket {
    fn node(&self) -> NodeId {
        NodeId::Worker(self.index)
    }

    fn send(&mut self, to: NodeId, env: Envelope) -> Result<()> {
        if to != NodeId::Ps {
            return Err(Error::Transport(format!("worker {} can only talk to the PS", self.index)));
        }
        env.write_to(&mut self.stream)?;
        self.wire_bytes.fetch_add(env.wire_len() as u64, Ordering::Relaxed);
        self.stats.record_send(&env);
        Ok(())
    }

    fn recv(&mut self) -> impl Future<Output = Result<Envelope>> {
        future::ready(self.recv_blocking())
    }

    fn advance(&mut self, cost: f64) {
        self.clock += cost;
    }

    fn now(&self) -> f64 {
        self.clock
    }

    fn stats(&self) -> &TrafficStats {
        &self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::wire::Kind;

    #[test]
    fn frames_cross_a_real_socket() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let bytes = Arc::new(AtomicU64::new(0));
        let timeout = Duration::from_secs(5);
        let wb = bytes.clone();
        let worker = thread::spawn(move || {
            let mut ep = WorkerSocket::connect(addr, 1, timeout, wb).unwrap();
            ep.send(NodeId::Ps, Envelope::new(Kind::PullRequest, ep.node(), 0, vec![])).unwrap();
            block_on(ep.recv()).unwrap()
        });
        let mut worker0 = WorkerSocket::connect(addr, 0, timeout, bytes.clone()).unwrap();
        worker0.send(NodeId::Ps, Envelope::new(Kind::Shutdown, worker0.node(), 0, vec![])).unwrap();

        let mut ps = PsSocket::accept(&listener, 2, timeout, bytes.clone()).unwrap();
        let a = block_on(ps.recv()).unwrap();
        let b = block_on(ps.recv()).unwrap();
        assert_eq!((a.sender, b.sender), (NodeId::Worker(0), NodeId::Worker(1)));
        ps.send(NodeId::Worker(1), Envelope::new(Kind::IterationReport, NodeId::Ps, 0, vec![9; 8])).unwrap();
        let reply = worker.join().unwrap();
        assert_eq!(reply.payload, vec![9; 8]);
        assert_eq!(bytes.load(Ordering::Relaxed), 15 * 3 + 8);
        assert_eq!(ps.stats().bytes_received, 30);
    }

    #[test]
    fn worker_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let mut ep = WorkerSocket::connect(addr, 0, Duration::from_millis(50), Arc::new(AtomicU64::new(0))).unwrap();
        let err = block_on(ep.recv()).unwrap_err();
        assert!(matches!(err, Error::Timeout(..)));
    }
}
