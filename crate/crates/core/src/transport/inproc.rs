use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::reassembly::Inbound;
use super::wire::split;
use super::{Message, Receipt, SeqCounters, Transport, TransportConfig, TransportError};
use crate::types::NodeId;

/// Endpoint of an in-memory network; chunks are handed straight to the
/// destination's reassembler.
pub struct InProcTransport {
    node: NodeId,
    peers: Arc<Vec<Arc<Inbound>>>,
    seqs: SeqCounters,
    max_chunk_bytes: usize,
    closed: AtomicBool,
}

impl InProcTransport {
    pub fn network(n: usize, config: &TransportConfig) -> Vec<Arc<InProcTransport>> {
        let peers: Arc<Vec<Arc<Inbound>>> = Arc::new(
            (0..n)
                .map(|i| Arc::new(Inbound::new(NodeId::from(i), config.reassembly_cap)))
                .collect(),
        );
        (0..n)
            .map(|i| {
                Arc::new(InProcTransport {
                    node: NodeId::from(i),
                    peers: Arc::clone(&peers),
                    seqs: SeqCounters::default(),
                    max_chunk_bytes: config.max_chunk_bytes.max(1),
                    closed: AtomicBool::new(false),
                })
            })
            .collect()
    }

    fn inbound(&self) -> &Inbound {
        &self.peers[self.node.index()]
    }
}

impl Transport for InProcTransport {
    fn node(&self) -> NodeId {
        self.node
    }

    fn n_nodes(&self) -> usize {
        self.peers.len()
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
        let target = self
            .peers
            .get(dst.index())
            .ok_or(TransportError::Address(dst))?;
        let seq = self.seqs.next(dst, channel);
        let chunks = split(self.node, dst, channel, phase, seq, payload, self.max_chunk_bytes);
        let n = chunks.len() as u32;
        for c in chunks {
            target.ingest(c)?;
        }
        Ok(Receipt { seq, chunks: n })
    }

    fn recv(&self, channel: u16, timeout: Duration) -> Result<Message, TransportError> {
        self.inbound().recv(channel, timeout)
    }

    fn failure(&self) -> Option<TransportError> {
        self.inbound().failure()
    }

    fn shutdown(&self) {
        self.closed.store(true, Ordering::Release);
        self.inbound().close();
    }
}
