//! Node-to-node message delivery.
//!
//! Two implementations share one contract: [`InProcTransport`] moves chunk
//! envelopes between in-memory queues, [`TcpTransport`] writes them as
//! length-prefixed frames over loopback or LAN sockets. Every payload is
//! chunked to at most `max_chunk_bytes` and reassembled on arrival; messages
//! of one `(src, dst, channel)` stream are delivered in send order.

mod inproc;
mod reassembly;
mod tcp;
pub mod wire;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

pub use inproc::InProcTransport;
pub use reassembly::Reassembler;
pub use tcp::TcpTransport;
pub use wire::{DecodeError, Envelope};

use crate::types::{NodeId, TransportKind};

/// Logical channel tags used by the runtimes.
pub mod channel {
    /// Remote actor messages.
    pub const ACTOR: u16 = 1;
    /// Shared-memory remote execution requests and replies.
    pub const REMOTE_EXEC: u16 = 2;
}

pub const DEFAULT_MAX_CHUNK_BYTES: usize = 60_000;
pub const DEFAULT_REASSEMBLY_CAP: usize = 256 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransportConfig {
    pub max_chunk_bytes: usize,
    pub connect_timeout: Duration,
    /// One `ip:port` per node; empty means "bind ephemeral loopback ports".
    pub endpoints: Vec<String>,
    pub reassembly_cap: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            max_chunk_bytes: DEFAULT_MAX_CHUNK_BYTES,
            connect_timeout: Duration::from_secs(5),
            endpoints: Vec::new(),
            reassembly_cap: DEFAULT_REASSEMBLY_CAP,
        }
    }
}

impl TransportConfig {
    pub fn with_max_chunk_bytes(mut self, n: usize) -> Self {
        self.max_chunk_bytes = n;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("unknown destination {0}")]
    Address(NodeId),
    #[error("receive timed out")]
    Timeout,
    #[error("transport closed")]
    Closed,
    #[error("link failure: {0}")]
    Link(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("reassembly buffer holds {buffered} bytes, cap is {cap}")]
    ReassemblyOverflow { buffered: usize, cap: usize },
    #[error("invalid transport config: {0}")]
    Config(String),
}

/// A reassembled message as seen by the receiving node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub src: NodeId,
    pub channel: u16,
    pub phase: Option<u64>,
    pub seq: u64,
    pub payload: Vec<u8>,
}

/// Returned by [`Transport::send`] once every chunk has been handed to the link.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Receipt {
    pub seq: u64,
    pub chunks: u32,
}

pub trait Transport: Send + Sync {
    fn node(&self) -> NodeId;

    fn n_nodes(&self) -> usize;

    fn max_chunk_bytes(&self) -> usize;

    /// Sends one logical message; delivery is asynchronous.
    fn send(
        &self,
        dst: NodeId,
        channel: u16,
        phase: Option<u64>,
        payload: &[u8],
    ) -> Result<Receipt, TransportError>;

    /// Next message for this node on `channel`, waiting at most `timeout`.
    fn recv(&self, channel: u16, timeout: Duration) -> Result<Message, TransportError>;

    /// Sticky failure, if the link has failed.
    fn failure(&self) -> Option<TransportError>;

    fn shutdown(&self);
}

/// Per-destination, per-channel sequence counters.
#[derive(Default)]
pub(crate) struct SeqCounters(Mutex<HashMap<(NodeId, u16), u64>>);

impl SeqCounters {
    pub(crate) fn next(&self, dst: NodeId, channel: u16) -> u64 {
        let mut m = self.0.lock();
        let c = m.entry((dst, channel)).or_insert(0);
        let s = *c;
        *c += 1;
        s
    }
}

/// Starts `n` connected endpoints of the requested kind.
pub fn start_network(
    kind: TransportKind,
    n: usize,
    config: &TransportConfig,
) -> Result<Vec<Arc<dyn Transport>>, TransportError> {
    if config.max_chunk_bytes == 0 {
        return Err(TransportError::Config("max_chunk_bytes must be >= 1".into()));
    }
    Ok(match kind {
        TransportKind::InProcess => InProcTransport::network(n, config)
            .into_iter()
            .map(|t| t as Arc<dyn Transport>)
            .collect(),
        TransportKind::Tcp => TcpTransport::network(n, config)?
            .into_iter()
            .map(|t| t as Arc<dyn Transport>)
            .collect(),
    })
}
