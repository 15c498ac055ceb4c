//! Length-prefixed binary framing for [`Envelope`]s.
//!
//! Frame layout, all integers big-endian:
//!
//! ```text
//! u32 frame_len   (bytes that follow this field)
//! u32 src
//! u32 dst
//! u16 channel
//! u8  phase_present (0 or 1)
//! u64 phase       (only when phase_present = 1)
//! u64 seq
//! u32 chunk_index
//! u32 chunk_total
//! ..  payload     (rest of the frame)
//! ```

use std::io::{self, Read};

use thiserror::Error;

use crate::types::NodeId;

/// Largest frame a reader accepts; guards against corrupt length prefixes.
pub const MAX_FRAME_BYTES: usize = 64 << 20;

const FIXED_HEADER: usize = 4 + 4 + 2 + 1 + 8 + 4 + 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub src: NodeId,
    pub dst: NodeId,
    pub channel: u16,
    pub phase: Option<u64>,
    pub seq: u64,
    pub chunk_index: u32,
    pub chunk_total: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame length {declared} does not match {actual} available bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid phase flag {0}")]
    PhaseFlag(u8),
    #[error("chunk index {index} out of range for {total} chunks")]
    ChunkIndex { index: u32, total: u32 },
    #[error("frame of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
}

/// Encodes `e` as one complete frame, length prefix included.
pub fn encode(e: &Envelope) -> Vec<u8> {
    let body_len = FIXED_HEADER + if e.phase.is_some() { 8 } else { 0 } + e.payload.len();
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.extend_from_slice(&e.src.0.to_be_bytes());
    out.extend_from_slice(&e.dst.0.to_be_bytes());
    out.extend_from_slice(&e.channel.to_be_bytes());
    match e.phase {
        Some(p) => {
            out.push(1);
            out.extend_from_slice(&p.to_be_bytes());
        }
        None => out.push(0),
    }
    out.extend_from_slice(&e.seq.to_be_bytes());
    out.extend_from_slice(&e.chunk_index.to_be_bytes());
    out.extend_from_slice(&e.chunk_total.to_be_bytes());
    out.extend_from_slice(&e.payload);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos + N;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated {
                needed: end,
                have: self.buf.len(),
            });
        }
        let mut a = [0u8; N];
        a.copy_from_slice(&self.buf[self.pos..end]);
        self.pos = end;
        Ok(a)
    }
}

/// Decodes one complete frame (length prefix included).
pub fn decode(frame: &[u8]) -> Result<Envelope, DecodeError> {
    let mut c = Cursor { buf: frame, pos: 0 };
    let declared = u32::from_be_bytes(c.take::<4>()?) as usize;
    if declared != frame.len() - 4 {
        if declared > frame.len() - 4 {
            return Err(DecodeError::Truncated {
                needed: declared + 4,
                have: frame.len(),
            });
        }
        return Err(DecodeError::LengthMismatch {
            declared,
            actual: frame.len() - 4,
        });
    }
    decode_body(&frame[4..])
}

/// Decodes a frame body whose length prefix was already consumed.
pub fn decode_body(body: &[u8]) -> Result<Envelope, DecodeError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let src = NodeId(u32::from_be_bytes(c.take()?));
    let dst = NodeId(u32::from_be_bytes(c.take()?));
    let channel = u16::from_be_bytes(c.take()?);
    let [flag] = c.take::<1>()?;
    let phase = match flag {
        0 => None,
        1 => Some(u64::from_be_bytes(c.take()?)),
        f => return Err(DecodeError::PhaseFlag(f)),
    };
    let seq = u64::from_be_bytes(c.take()?);
    let chunk_index = u32::from_be_bytes(c.take()?);
    let chunk_total = u32::from_be_bytes(c.take()?);
    if chunk_index >= chunk_total {
        return Err(DecodeError::ChunkIndex {
            index: chunk_index,
            total: chunk_total,
        });
    }
    Ok(Envelope {
        src,
        dst,
        channel,
        phase,
        seq,
        chunk_index,
        chunk_total,
        payload: body[c.pos..].to_vec(),
    })
}

/// Reads the body of the next frame. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            DecodeError::TooLarge(len),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

/// Number of chunks a payload of `len` bytes is split into.
pub fn chunk_count(len: usize, max_chunk_bytes: usize) -> usize {
    if len == 0 {
        1
    } else {
        len.div_ceil(max_chunk_bytes)
    }
}

/// Splits one logical message into chunk envelopes sharing `seq`.
pub fn split(
    src: NodeId,
    dst: NodeId,
    channel: u16,
    phase: Option<u64>,
    seq: u64,
    payload: &[u8],
    max_chunk_bytes: usize,
) -> Vec<Envelope> {
    let total = chunk_count(payload.len(), max_chunk_bytes);
    let mk = |i: usize, bytes: &[u8]| Envelope {
        src,
        dst,
        channel,
        phase,
        seq,
        chunk_index: i as u32,
        chunk_total: total as u32,
        payload: bytes.to_vec(),
    };
    if payload.is_empty() {
        return vec![mk(0, &[])];
    }
    payload
        .chunks(max_chunk_bytes)
        .enumerate()
        .map(|(i, c)| mk(i, c))
        .collect()
}
