use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::reassembly::Inbound;
use super::wire::{self, split};
use super::{Message, Receipt, SeqCounters, Transport, TransportConfig, TransportError};
use crate::types::NodeId;

/// Endpoint that exchanges length-prefixed frames over TCP, one outbound
/// connection per peer.
pub struct TcpTransport {
    node: NodeId,
    addrs: Arc<Vec<SocketAddr>>,
    inbound: Arc<Inbound>,
    seqs: SeqCounters,
    max_chunk_bytes: usize,
    connect_timeout: Duration,
    links: Vec<Mutex<Option<TcpStream>>>,
    accepted: Arc<Mutex<Vec<TcpStream>>>,
    closed: Arc<AtomicBool>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
}

fn resolve(s: &str) -> Result<SocketAddr, TransportError> {
    s.to_socket_addrs()
        .map_err(|e| TransportError::Config(format!("{s}: {e}")))?
        .next()
        .ok_or_else(|| TransportError::Config(format!("{s}: no address")))
}

impl TcpTransport {
    /// Binds one listener per node (the configured endpoints, or ephemeral
    /// loopback ports when none are given) and starts their accept loops.
    pub fn network(
        n: usize,
        config: &TransportConfig,
    ) -> Result<Vec<Arc<TcpTransport>>, TransportError> {
        let listeners: Vec<TcpListener> = if config.endpoints.is_empty() {
            (0..n)
                .map(|_| TcpListener::bind("127.0.0.1:0"))
                .collect::<Result<_, _>>()
                .map_err(|e| TransportError::Link(e.to_string()))?
        } else {
            if config.endpoints.len() != n {
                return Err(TransportError::Config(format!(
                    "{} endpoints for {n} nodes",
                    config.endpoints.len()
                )));
            }
            config
                .endpoints
                .iter()
                .map(|s| {
                    TcpListener::bind(resolve(s)?)
                        .map_err(|e| TransportError::Link(format!("bind {s}: {e}")))
                })
                .collect::<Result<_, _>>()?
        };
        let addrs: Arc<Vec<SocketAddr>> = Arc::new(
            listeners
                .iter()
                .map(|l| l.local_addr())
                .collect::<Result<_, _>>()
                .map_err(|e| TransportError::Link(e.to_string()))?,
        );
        let mut out = Vec::with_capacity(n);
        for (i, listener) in listeners.into_iter().enumerate() {
            let node = NodeId::from(i);
            let t = Arc::new(TcpTransport {
                node,
                addrs: Arc::clone(&addrs),
                inbound: Arc::new(Inbound::new(node, config.reassembly_cap)),
                seqs: SeqCounters::default(),
                max_chunk_bytes: config.max_chunk_bytes.max(1),
                connect_timeout: config.connect_timeout,
                links: (0..n).map(|_| Mutex::new(None)).collect(),
                accepted: Arc::new(Mutex::new(Vec::new())),
                closed: Arc::new(AtomicBool::new(false)),
                acceptor: Mutex::new(None),
            });
            let handle = spawn_acceptor(
                listener,
                Arc::clone(&t.inbound),
                Arc::clone(&t.accepted),
                Arc::clone(&t.closed),
            );
            *t.acceptor.lock() = Some(handle);
            out.push(t);
        }
        Ok(out)
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addrs[self.node.index()]
    }

    fn connect(&self, dst: NodeId) -> Result<TcpStream, TransportError> {
        let addr = self.addrs[dst.index()];
        let deadline = Instant::now() + self.connect_timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match TcpStream::connect_timeout(&addr, left.max(Duration::from_millis(10))) {
                Ok(s) => {
                    let _ = s.set_nodelay(true);
                    return Ok(s);
                }
                Err(e) if Instant::now() >= deadline => {
                    return Err(TransportError::Link(format!("connect {addr}: {e}")))
                }
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        }
    }
}

fn spawn_acceptor(
    listener: TcpListener,
    inbound: Arc<Inbound>,
    accepted: Arc<Mutex<Vec<TcpStream>>>,
    closed: Arc<AtomicBool>,
) -> JoinHandle<()> {
    thread::Builder::new()
        .name("tcp-accept".into())
        .spawn(move || {
            for stream in listener.incoming() {
                if closed.load(Ordering::Acquire) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    accepted.lock().push(clone);
                }
                let inbound = Arc::clone(&inbound);
                let closed = Arc::clone(&closed);
                let _ = thread::Builder::new()
                    .name("tcp-read".into())
                    .spawn(move || read_loop(stream, &inbound, &closed));
            }
        })
        .expect("spawn accept thread")
}

fn read_loop(mut stream: TcpStream, inbound: &Inbound, closed: &AtomicBool) {
    loop {
        match wire::read_frame(&mut stream) {
            Ok(Some(body)) => match wire::decode_body(&body) {
                Ok(env) => {
                    if inbound.ingest(env).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    inbound.fail(TransportError::Protocol(e.to_string()));
                    return;
                }
            },
            Ok(None) => return,
            Err(e) => {
                if !closed.load(Ordering::Acquire) {
                    inbound.fail(TransportError::Link(e.to_string()));
                }
                return;
            }
        }
    }
}

impl Transport for TcpTransport {
    fn node(&self) -> NodeId {
        self.node
    }

    fn n_nodes(&self) -> usize {
        self.addrs.len()
    }

    fn max_chunk_bytes(&self) -> usize {
        self.max_chunk_bytes
    }

    fn send(
        &self,
        dst: NodeId,
        channel: u16,
        phase: Option<u64>,
        payload: &[u8],
    ) -> Result<Receipt, TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::Closed);
        }
        if dst.index() >= self.addrs.len() {
            return Err(TransportError::Address(dst));
        }
        if let Some(err) = self.inbound.failure() {
            return Err(err);
        }
        let seq = self.seqs.next(dst, channel);
        let chunks = split(self.node, dst, channel, phase, seq, payload, self.max_chunk_bytes);
        let n = chunks.len() as u32;

        if dst == self.node {
            for c in chunks {
                let frame = wire::encode(&c);
                let env = wire::decode(&frame).map_err(|e| TransportError::Protocol(e.to_string()))?;
                self.inbound.ingest(env)?;
            }
            return Ok(Receipt { seq, chunks: n });
        }

        let mut buf = Vec::with_capacity(payload.len() + 40 * chunks.len());
        for c in &chunks {
            buf.extend_from_slice(&wire::encode(c));
        }
        // Frames of one message are written under the link lock so concurrent
        // senders never interleave bytes on the stream.
        let mut link = self.links[dst.index()].lock();
        if link.is_none() {
            *link = Some(self.connect(dst)?);
        }
        let stream = link.as_mut().expect("connected");
        if let Err(e) = stream.write_all(&buf) {
            *link = None;
            let err = TransportError::Link(format!("send to {dst}: {e}"));
            self.inbound.fail(err.clone());
            return Err(err);
        }
        Ok(Receipt { seq, chunks: n })
    }

    fn recv(&self, channel: u16, timeout: Duration) -> Result<Message, TransportError> {
        self.inbound.recv(channel, timeout)
    }

    fn failure(&self) -> Option<TransportError> {
        self.inbound.failure()
    }

    fn shutdown(&self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        for l in &self.links {
            if let Some(s) = l.lock().take() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        for s in self.accepted.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        // Wake the accept loop so it observes the closed flag.
        let _ = TcpStream::connect_timeout(&self.local_addr(), Duration::from_millis(200));
        if let Some(h) = self.acceptor.lock().take() {
            let _ = h.join();
        }
        self.inbound.close();
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}
