//! Receive side shared by both transports: chunk reassembly, in-order release
//! per `(src, channel)` and per-channel delivery queues.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;

use super::wire::Envelope;
use super::{Message, TransportError};
use crate::types::NodeId;

struct Partial {
    chunks: Vec<Option<Vec<u8>>>,
    received: u32,
    phase: Option<u64>,
    bytes: usize,
}

/// Turns chunk envelopes back into whole messages.
///
/// Completed messages are released strictly in `seq` order per
/// `(src, channel)`; a message that completes early waits for its
/// predecessors.
pub struct Reassembler {
    partial: HashMap<(NodeId, u16, u64), Partial>,
    next_seq: HashMap<(NodeId, u16), u64>,
    parked: HashMap<(NodeId, u16), BTreeMap<u64, Message>>,
    buffered: usize,
    cap: usize,
}

impl Reassembler {
    pub fn new(cap: usize) -> Self {
        Reassembler {
            partial: HashMap::new(),
            next_seq: HashMap::new(),
            parked: HashMap::new(),
            buffered: 0,
            cap,
        }
    }

    pub fn buffered_bytes(&self) -> usize {
        self.buffered
    }

    /// Feeds one chunk; returns the messages that became deliverable.
    pub fn ingest(&mut self, e: Envelope) -> Result<Vec<Message>, TransportError> {
        if e.chunk_total == 0 || e.chunk_index >= e.chunk_total {
            return Err(TransportError::Protocol(format!(
                "chunk {}/{} from {}",
                e.chunk_index, e.chunk_total, e.src
            )));
        }
        let stream = (e.src, e.channel);
        let expected = *self.next_seq.get(&stream).unwrap_or(&0);
        if e.seq < expected {
            return Err(TransportError::Protocol(format!(
                "duplicate message seq {} from {} on channel {}",
                e.seq, e.src, e.channel
            )));
        }

        let key = (e.src, e.channel, e.seq);
        let total = e.chunk_total as usize;
        let partial = self.partial.entry(key).or_insert_with(|| Partial {
            chunks: vec![None; total],
            received: 0,
            phase: e.phase,
            bytes: 0,
        });
        if partial.chunks.len() != total {
            return Err(TransportError::Protocol(format!(
                "inconsistent chunk_total for seq {} from {}",
                e.seq, e.src
            )));
        }
        let slot = &mut partial.chunks[e.chunk_index as usize];
        if slot.is_some() {
            return Err(TransportError::Protocol(format!(
                "duplicate chunk {} of seq {} from {}",
                e.chunk_index, e.seq, e.src
            )));
        }
        partial.bytes += e.payload.len();
        partial.received += 1;
        self.buffered += e.payload.len();
        *slot = Some(e.payload);
        if self.buffered > self.cap {
            return Err(TransportError::ReassemblyOverflow {
                buffered: self.buffered,
                cap: self.cap,
            });
        }
        if partial.received as usize != total {
            return Ok(Vec::new());
        }

        let partial = self.partial.remove(&key).expect("present");
        let mut payload = Vec::with_capacity(partial.bytes);
        for c in partial.chunks {
            payload.extend_from_slice(&c.expect("complete"));
        }
        let msg = Message {
            src: e.src,
            channel: e.channel,
            phase: partial.phase,
            seq: e.seq,
            payload,
        };

        if e.seq != expected {
            // Completed ahead of an earlier message; keep it until its turn.
            self.parked.entry(stream).or_default().insert(e.seq, msg);
            return Ok(Vec::new());
        }
        let mut out = vec![msg];
        let mut next = expected + 1;
        if let Some(waiting) = self.parked.get_mut(&stream) {
            while let Some(m) = waiting.remove(&next) {
                out.push(m);
                next += 1;
            }
        }
        self.next_seq.insert(stream, next);
        for m in &out {
            self.buffered -= m.payload.len();
        }
        Ok(out)
    }
}

/// Per-node receive state used by every transport implementation.
pub(crate) struct Inbound {
    node: NodeId,
    reassembler: Mutex<Reassembler>,
    queues: Mutex<Option<HashMap<u16, (Sender<Message>, Receiver<Message>)>>>,
    failure: Mutex<Option<TransportError>>,
}

impl Inbound {
    pub(crate) fn new(node: NodeId, reassembly_cap: usize) -> Self {
        Inbound {
            node,
            reassembler: Mutex::new(Reassembler::new(reassembly_cap)),
            queues: Mutex::new(Some(HashMap::new())),
            failure: Mutex::new(None),
        }
    }

    fn receiver(&self, channel: u16) -> Option<Receiver<Message>> {
        let mut q = self.queues.lock();
        let map = q.as_mut()?;
        Some(
            map.entry(channel)
                .or_insert_with(crossbeam_channel::unbounded)
                .1
                .clone(),
        )
    }

    /// Accepts one chunk addressed to this node.
    pub(crate) fn ingest(&self, e: Envelope) -> Result<(), TransportError> {
        if e.dst != self.node {
            let err = TransportError::Protocol(format!(
                "frame for {} arrived at {}",
                e.dst, self.node
            ));
            self.fail(err.clone());
            return Err(err);
        }
        let channel = e.channel;
        // The reassembler lock is held while enqueueing so that concurrent
        // ingest calls cannot reorder messages of one stream.
        let mut r = self.reassembler.lock();
        let ready = match r.ingest(e) {
            Ok(ready) => ready,
            Err(err) => {
                drop(r);
                self.fail(err.clone());
                return Err(err);
            }
        };
        if ready.is_empty() {
            return Ok(());
        }
        let mut q = self.queues.lock();
        let Some(map) = q.as_mut() else {
            return Err(TransportError::Closed);
        };
        let tx = &map
            .entry(channel)
            .or_insert_with(crossbeam_channel::unbounded)
            .0;
        for m in ready {
            let _ = tx.send(m);
        }
        Ok(())
    }

    pub(crate) fn recv(&self, channel: u16, timeout: Duration) -> Result<Message, TransportError> {
        if let Some(err) = self.failure.lock().clone() {
            return Err(err);
        }
        let rx = self.receiver(channel).ok_or(TransportError::Closed)?;
        match rx.recv_timeout(timeout) {
            Ok(m) => Ok(m),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout),
            Err(RecvTimeoutError::Disconnected) => {
                Err(self.failure.lock().clone().unwrap_or(TransportError::Closed))
            }
        }
    }

    pub(crate) fn failure(&self) -> Option<TransportError> {
        self.failure.lock().clone()
    }

    pub(crate) fn fail(&self, err: TransportError) {
        log::error!("{}: transport failure: {err}", self.node);
        {
            let mut f = self.failure.lock();
            if f.is_none() {
                *f = Some(err);
            }
        }
        self.queues.lock().take();
    }

    pub(crate) fn close(&self) {
        self.queues.lock().take();
    }
}

#[cfg(test)]
mod tests {
    use super::super::wire::split;
    use super::*;

    fn chunks(src: u32, seq: u64, payload: &[u8], max: usize) -> Vec<Envelope> {
        split(NodeId(src), NodeId(9), 1, None, seq, payload, max)
    }

    #[test]
    fn out_of_order_chunks_reassemble() {
        let mut r = Reassembler::new(1 << 20);
        let payload: Vec<u8> = (0..50).collect();
        let mut cs = chunks(0, 0, &payload, 16);
        cs.reverse();
        let mut out = Vec::new();
        for c in cs {
            out.extend(r.ingest(c).unwrap());
        }
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].payload, payload);
        assert_eq!(r.buffered_bytes(), 0);
    }

    #[test]
    fn later_message_waits_for_earlier_one() {
        let mut r = Reassembler::new(1 << 20);
        let m0 = chunks(0, 0, b"first-message-long", 4);
        let m1 = chunks(0, 1, b"second", 100);
        assert!(r.ingest(m1[0].clone()).unwrap().is_empty());
        let mut out = Vec::new();
        for c in m0 {
            out.extend(r.ingest(c).unwrap());
        }
        let seqs: Vec<_> = out.iter().map(|m| m.seq).collect();
        assert_eq!(seqs, vec![0, 1]);
    }

    #[test]
    fn interleaved_sources_both_complete() {
        let mut r = Reassembler::new(1 << 20);
        let a: Vec<u8> = vec![1; 40];
        let b: Vec<u8> = vec![2; 33];
        let ca = chunks(0, 0, &a, 8);
        let cb = chunks(1, 0, &b, 8);
        let mut out = Vec::new();
        let n = ca.len().max(cb.len());
        for i in 0..n {
            if let Some(c) = ca.get(i) {
                out.extend(r.ingest(c.clone()).unwrap());
            }
            if let Some(c) = cb.get(i) {
                out.extend(r.ingest(c.clone()).unwrap());
            }
        }
        assert_eq!(out.len(), 2);
        let got_a = out.iter().find(|m| m.src == NodeId(0)).unwrap();
        let got_b = out.iter().find(|m| m.src == NodeId(1)).unwrap();
        assert_eq!(got_a.payload, a);
        assert_eq!(got_b.payload, b);
    }

    #[test]
    fn duplicate_delivery_is_a_protocol_error() {
        let mut r = Reassembler::new(1 << 20);
        let c = chunks(0, 0, b"x", 8);
        r.ingest(c[0].clone()).unwrap();
        assert!(matches!(
            r.ingest(c[0].clone()),
            Err(TransportError::Protocol(_))
        ));
    }

    #[test]
    fn memory_cap_aborts() {
        let mut r = Reassembler::new(10);
        let cs = chunks(0, 0, &[0u8; 64], 8);
        let mut res = Ok(Vec::new());
        for c in cs {
            res = r.ingest(c);
            if res.is_err() {
                break;
            }
        }
        assert!(matches!(
            res,
            Err(TransportError::ReassemblyOverflow { .. })
        ));
    }
}
