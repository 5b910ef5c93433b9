//! Length-prefixed framing.
//!
//! Every frame on every connection (master and p2p) is
//!
//! ```text
//! +----------------+---------+-----------------+
//! | length: u32 BE | type:u8 | payload bytes   |
//! +----------------+---------+-----------------+
//! ```
//!
//! where `length == 1 + payload.len()`. See `docs/protocol.md`.

use std::io::{self, Read, Write};

use super::WireError;

/// Bytes preceding the payload: 4-byte length plus the type byte.
pub const FRAME_HEADER_LEN: usize = 5;

/// Largest payload representable by the length prefix.
pub const MAX_PAYLOAD_LEN: usize = u32::MAX as usize - 1;

/// Closed set of message codes. Codes are fixed by the protocol document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageType {
    JoinRequest = 1,
    JoinAssign = 2,
    VoteRequest = 3,
    VoteCast = 4,
    TransitionCommit = 5,
    AbortNotify = 6,
    TopologyAssign = 7,
    BandwidthProbeRequest = 8,
    BandwidthProbeReport = 9,
    SharedStateReport = 10,
    SharedStatePlan = 11,
    SharedStateChunk = 12,
    CollectiveInitVote = 13,
    CollectiveCompleteVote = 14,
    ChunkData = 15,
    ChunkAck = 16,
    QuantMeta = 17,
    PendingPeersQuery = 18,
    PendingPeersAnswer = 19,
    Bye = 20,
}

impl MessageType {
    pub const ALL: [MessageType; 20] = [
        MessageType::JoinRequest,
        MessageType::JoinAssign,
        MessageType::VoteRequest,
        MessageType::VoteCast,
        MessageType::TransitionCommit,
        MessageType::AbortNotify,
        MessageType::TopologyAssign,
        MessageType::BandwidthProbeRequest,
        MessageType::BandwidthProbeReport,
        MessageType::SharedStateReport,
        MessageType::SharedStatePlan,
        MessageType::SharedStateChunk,
        MessageType::CollectiveInitVote,
        MessageType::CollectiveCompleteVote,
        MessageType::ChunkData,
        MessageType::ChunkAck,
        MessageType::QuantMeta,
        MessageType::PendingPeersQuery,
        MessageType::PendingPeersAnswer,
        MessageType::Bye,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            1..=20 => Ok(Self::ALL[code as usize - 1]),
            other => Err(WireError::UnknownMessageType(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MessageType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MessageType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    /// Total bytes this frame occupies on the wire.
    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }
}

/// Builds the 5-byte frame header for a payload of `payload_len` bytes.
pub fn frame_header(msg_type: MessageType, payload_len: usize) -> Result<[u8; FRAME_HEADER_LEN], WireError> {
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(WireError::Oversize { len: payload_len });
    }
    let len = (payload_len + 1) as u32;
    let mut header = [0u8; FRAME_HEADER_LEN];
    header[..4].copy_from_slice(&len.to_be_bytes());
    header[4] = msg_type.code();
    Ok(header)
}

pub fn encode_frame(msg_type: MessageType, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let header = frame_header(msg_type, payload.len())?;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Writes one frame without concatenating header and payload first.
pub fn write_frame<W: Write + ?Sized>(w: &mut W, msg_type: MessageType, payload: &[u8]) -> Result<(), WireError> {
    let header = frame_header(msg_type, payload.len())?;
    w.write_all(&header)?;
    w.write_all(payload)?;
    Ok(())
}

/// Parses the fixed header, returning `(type, payload_len)`.
pub fn parse_header(header: &[u8; FRAME_HEADER_LEN]) -> Result<(MessageType, usize), WireError> {
    let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]);
    if len == 0 {
        return Err(WireError::Malformed("zero frame length".into()));
    }
    let msg_type = MessageType::from_code(header[4])?;
    Ok((msg_type, len as usize - 1))
}

/// Reads a frame header from a stream. A clean end-of-stream before the first
/// byte is reported as [`WireError::Closed`].
pub fn read_header<R: Read + ?Sized>(r: &mut R) -> Result<(MessageType, usize), WireError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut filled = 0;
    while filled < FRAME_HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(WireError::Closed),
            Ok(0) => {
                return Err(WireError::Incomplete {
                    needed: FRAME_HEADER_LEN - filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    parse_header(&header)
}

/// Reads exactly one frame from a byte source, consuming `length + 4` bytes.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Frame, WireError> {
    read_frame_limited(r, MAX_PAYLOAD_LEN)
}

/// Like [`read_frame`] but refuses payloads above `max_payload`.
pub fn read_frame_limited<R: Read + ?Sized>(r: &mut R, max_payload: usize) -> Result<Frame, WireError> {
    let (msg_type, len) = read_header(r)?;
    if len > max_payload {
        return Err(WireError::Oversize { len });
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Incomplete { needed: len },
        _ => WireError::Io(e),
    })?;
    Ok(Frame { msg_type, payload })
}

/// Decodes the first frame of `bytes`, returning it with the number of bytes
/// consumed. Trailing bytes are left untouched.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), WireError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(WireError::Incomplete {
            needed: FRAME_HEADER_LEN - bytes.len(),
        });
    }
    let header: [u8; FRAME_HEADER_LEN] = bytes[..FRAME_HEADER_LEN].try_into().expect("header slice");
    let (msg_type, len) = parse_header(&header)?;
    let total = FRAME_HEADER_LEN + len;
    if bytes.len() < total {
        return Err(WireError::Incomplete {
            needed: total - bytes.len(),
        });
    }
    let payload = bytes[FRAME_HEADER_LEN..total].to_vec();
    Ok((Frame { msg_type, payload }, total))
}

/// Incremental decoder: bytes may be fed in arbitrary pieces.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Returns the next complete frame, `Ok(None)` when more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, WireError> {
        match decode_frame(&self.buf) {
            Ok((frame, used)) => {
                self.buf.drain(..used);
                Ok(Some(frame))
            }
            Err(WireError::Incomplete { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
