//! Bit-exact framing for block requests and block-stream responses.
//!
//! Everything is big-endian. A request is
//!
//! ```text
//! magic "SF" | version u8=1 | msg_type u8=0 | token[16] | name_len u16 | name | block_index u32
//! ```
//!
//! and a response is
//!
//! ```text
//! magic "SF" | version u8=1 | msg_type u8=1 | status u8 | count u16 | count x (block_index u32 | payload[block_size])
//! ```
//!
//! The payload size is connection configuration, not part of the frame, so
//! decoding a response needs the agreed `block_size`. One request yields one
//! response; a response may carry many blocks (a pushed segment rides along
//! with the requested block).

use crate::model::BlockIndex;
use crate::time::VirtualTime;
use std::io::{self, Read, Write};
use thiserror::Error;

pub const WIRE_MAGIC: [u8; 2] = *b"SF";
pub const WIRE_VERSION: u8 = 1;
pub const MSG_REQUEST: u8 = 0;
pub const MSG_RESPONSE: u8 = 1;
pub const TOKEN_LEN: usize = 16;
pub const MAX_NAME_LEN: usize = 255;

/// Request header bytes before the name: magic + version + type + token + name_len.
pub const REQUEST_FIXED_LEN: usize = 2 + 1 + 1 + TOKEN_LEN + 2;
/// Full response header: magic + version + type + status + count.
pub const RESPONSE_HEADER_LEN: usize = 2 + 1 + 1 + 1 + 2;

/// Opaque identifier naming one executing run of one executable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(pub [u8; TOKEN_LEN]);

impl Token {
    pub fn from_bytes(bytes: [u8; TOKEN_LEN]) -> Self {
        Token(bytes)
    }

    /// A process-unique token: time-seeded hash mixed with a counter.
    pub fn fresh() -> Self {
        use std::sync::atomic::{AtomicU64, Ordering};
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let t = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        let mut rng =
            crate::rng::SplitMix64::new(t ^ n.rotate_left(32) ^ std::process::id() as u64);
        let mut b = [0u8; TOKEN_LEN];
        b[..8].copy_from_slice(&rng.next_u64().to_be_bytes());
        b[8..].copy_from_slice(&rng.next_u64().to_be_bytes());
        Token(b)
    }

    /// Deterministic token for simulations.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = crate::rng::SplitMix64::new(seed);
        let mut b = [0u8; TOKEN_LEN];
        b[..8].copy_from_slice(&rng.next_u64().to_be_bytes());
        b[8..].copy_from_slice(&rng.next_u64().to_be_bytes());
        Token(b)
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseStatus {
    Ok,
    UnknownExecutable,
    OutOfRange,
}

impl ResponseStatus {
    pub fn as_u8(self) -> u8 {
        match self {
            ResponseStatus::Ok => 0,
            ResponseStatus::UnknownExecutable => 1,
            ResponseStatus::OutOfRange => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ResponseStatus::Ok),
            1 => Some(ResponseStatus::UnknownExecutable),
            2 => Some(ResponseStatus::OutOfRange),
            _ => None,
        }
    }
}

impl std::fmt::Display for ResponseStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ResponseStatus::Ok => "ok",
            ResponseStatus::UnknownExecutable => "unknown_executable",
            ResponseStatus::OutOfRange => "out_of_range",
        };
        f.write_str(s)
    }
}

/// One redirected IO: who is asking (token), for what executable, which block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestFrame {
    pub token: Token,
    pub executable: String,
    pub block: BlockIndex,
}

impl RequestFrame {
    pub fn encoded_len(&self) -> usize {
        REQUEST_FIXED_LEN + self.executable.len() + 4
    }
}

/// The server's answer: a status and zero or more (index, payload) pairs.
/// The requested block, when served, is always the first entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseFrame {
    pub status: ResponseStatus,
    pub blocks: Vec<(BlockIndex, Vec<u8>)>,
}

impl ResponseFrame {
    pub fn error(status: ResponseStatus) -> Self {
        ResponseFrame {
            status,
            blocks: Vec::new(),
        }
    }

    pub fn encoded_len(&self, block_size: usize) -> usize {
        RESPONSE_HEADER_LEN + self.blocks.len() * (4 + block_size)
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {found:?} (expected \"SF\")")]
    BadMagic { found: [u8; 2] },
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unexpected message type {found} (expected {expected})")]
    BadMsgType { found: u8, expected: u8 },
    #[error("truncated frame: needed {needed} more byte(s) at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("executable name must be 1..=255 bytes, got {0}")]
    BadNameLength(usize),
    #[error("executable name is not UTF-8")]
    BadNameEncoding,
    #[error("unknown response status {0}")]
    BadStatus(u8),
    #[error("non-ok response must carry no blocks")]
    StatusWithBlocks,
    #[error("payload length {found} does not match block size {expected}")]
    PayloadSizeMismatch { found: usize, expected: usize },
    #[error("too many blocks in one response: {0} (max 65535)")]
    TooManyBlocks(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_request(frame: &RequestFrame) -> Result<Vec<u8>, WireError> {
    let name = frame.executable.as_bytes();
    if name.is_empty() || name.len() > MAX_NAME_LEN {
        return Err(WireError::BadNameLength(name.len()));
    }
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&WIRE_MAGIC);
    out.push(WIRE_VERSION);
    out.push(MSG_REQUEST);
    out.extend_from_slice(&frame.token.0);
    out.extend_from_slice(&(name.len() as u16).to_be_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&frame.block.0.to_be_bytes());
    Ok(out)
}

/// Decode one request from the front of `bytes`; returns the frame and the
/// number of bytes consumed, so concatenated frames on one stream decode in
/// sequence.
pub fn decode_request(bytes: &[u8]) -> Result<(RequestFrame, usize), WireError> {
    need(bytes, 0, REQUEST_FIXED_LEN)?;
    check_header(bytes, MSG_REQUEST)?;
    let mut token = [0u8; TOKEN_LEN];
    token.copy_from_slice(&bytes[4..4 + TOKEN_LEN]);
    let name_len = u16::from_be_bytes([bytes[20], bytes[21]]) as usize;
    if name_len == 0 || name_len > MAX_NAME_LEN {
        return Err(WireError::BadNameLength(name_len));
    }
    let total = REQUEST_FIXED_LEN + name_len + 4;
    need(bytes, REQUEST_FIXED_LEN, name_len + 4)?;
    let name = std::str::from_utf8(&bytes[REQUEST_FIXED_LEN..REQUEST_FIXED_LEN + name_len])
        .map_err(|_| WireError::BadNameEncoding)?
        .to_string();
    let idx_at = REQUEST_FIXED_LEN + name_len;
    let block = u32::from_be_bytes([
        bytes[idx_at],
        bytes[idx_at + 1],
        bytes[idx_at + 2],
        bytes[idx_at + 3],
    ]);
    Ok((
        RequestFrame {
            token: Token(token),
            executable: name,
            block: BlockIndex(block),
        },
        total,
    ))
}

pub fn encode_response(frame: &ResponseFrame, block_size: usize) -> Result<Vec<u8>, WireError> {
    if frame.status != ResponseStatus::Ok && !frame.blocks.is_empty() {
        return Err(WireError::StatusWithBlocks);
    }
    if frame.blocks.len() > u16::MAX as usize {
        return Err(WireError::TooManyBlocks(frame.blocks.len()));
    }
    let mut out = Vec::with_capacity(frame.encoded_len(block_size));
    out.extend_from_slice(&WIRE_MAGIC);
    out.push(WIRE_VERSION);
    out.push(MSG_RESPONSE);
    out.push(frame.status.as_u8());
    out.extend_from_slice(&(frame.blocks.len() as u16).to_be_bytes());
    for (index, payload) in &frame.blocks {
        if payload.len() != block_size {
            return Err(WireError::PayloadSizeMismatch {
                found: payload.len(),
                expected: block_size,
            });
        }
        out.extend_from_slice(&index.0.to_be_bytes());
        out.extend_from_slice(payload);
    }
    Ok(out)
}

/// Decode one response from the front of `bytes`. `block_size` is the
/// connection-configured payload size.
pub fn decode_response(
    bytes: &[u8],
    block_size: usize,
) -> Result<(ResponseFrame, usize), WireError> {
    need(bytes, 0, RESPONSE_HEADER_LEN)?;
    check_header(bytes, MSG_RESPONSE)?;
    let status = ResponseStatus::from_u8(bytes[4]).ok_or(WireError::BadStatus(bytes[4]))?;
    let count = u16::from_be_bytes([bytes[5], bytes[6]]) as usize;
    if status != ResponseStatus::Ok && count != 0 {
        return Err(WireError::StatusWithBlocks);
    }
    let total = RESPONSE_HEADER_LEN + count * (4 + block_size);
    need(bytes, RESPONSE_HEADER_LEN, count * (4 + block_size))?;
    let mut blocks = Vec::with_capacity(count);
    let mut at = RESPONSE_HEADER_LEN;
    for _ in 0..count {
        let index = u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
        let payload = bytes[at + 4..at + 4 + block_size].to_vec();
        blocks.push((BlockIndex(index), payload));
        at += 4 + block_size;
    }
    Ok((ResponseFrame { status, blocks }, total))
}

fn check_header(bytes: &[u8], expected_type: u8) -> Result<(), WireError> {
    if bytes[0..2] != WIRE_MAGIC {
        return Err(WireError::BadMagic {
            found: [bytes[0], bytes[1]],
        });
    }
    if bytes[2] != WIRE_VERSION {
        return Err(WireError::BadVersion(bytes[2]));
    }
    if bytes[3] != expected_type {
        return Err(WireError::BadMsgType {
            found: bytes[3],
            expected: expected_type,
        });
    }
    Ok(())
}

fn need(bytes: &[u8], offset: usize, more: usize) -> Result<(), WireError> {
    if bytes.len() < offset + more {
        return Err(WireError::Truncated {
            offset: bytes.len(),
            needed: offset + more - bytes.len(),
        });
    }
    Ok(())
}

/// Read exactly one request frame from a blocking stream.
pub fn read_request<R: Read>(reader: &mut R) -> Result<RequestFrame, WireError> {
    let mut head = [0u8; REQUEST_FIXED_LEN];
    reader.read_exact(&mut head)?;
    check_header(&head, MSG_REQUEST)?;
    let name_len = u16::from_be_bytes([head[20], head[21]]) as usize;
    if name_len == 0 || name_len > MAX_NAME_LEN {
        return Err(WireError::BadNameLength(name_len));
    }
    let mut rest = vec![0u8; name_len + 4];
    reader.read_exact(&mut rest)?;
    let mut whole = head.to_vec();
    whole.extend_from_slice(&rest);
    decode_request(&whole).map(|(f, _)| f)
}

/// Read exactly one response frame from a blocking stream.
pub fn read_response<R: Read>(
    reader: &mut R,
    block_size: usize,
) -> Result<ResponseFrame, WireError> {
    let mut head = [0u8; RESPONSE_HEADER_LEN];
    reader.read_exact(&mut head)?;
    check_header(&head, MSG_RESPONSE)?;
    let count = u16::from_be_bytes([head[5], head[6]]) as usize;
    let mut rest = vec![0u8; count * (4 + block_size)];
    reader.read_exact(&mut rest)?;
    let mut whole = head.to_vec();
    whole.extend_from_slice(&rest);
    decode_response(&whole, block_size).map(|(f, _)| f)
}

pub fn write_frame<W: Write>(writer: &mut W, encoded: &[u8]) -> Result<(), WireError> {
    writer.write_all(encoded)?;
    writer.flush()?;
    Ok(())
}

/// Metadata snapshot of a request plus the virtual time it faulted; what the
/// redirector hands to the networker through the ring.
#[derive(Debug, Clone)]
pub struct RequestMeta {
    pub frame: RequestFrame,
    pub faulted_at: VirtualTime,
}
