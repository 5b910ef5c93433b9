//! Typed payloads for every message type.

use super::codec::{PayloadReader, PayloadWriter};
use super::frame::{encode_frame, Frame, MessageType};
use super::WireError;
use crate::types::{AbortReason, Dtype, Quantization, ReduceOp, SyncStrategy};

fn bad(what: &str, code: u8) -> WireError {
    WireError::Malformed(format!("bad {what} code {code}"))
}

macro_rules! read_enum {
    ($r:expr, $ty:ty, $what:expr) => {{
        let code = $r.u8()?;
        <$ty>::from_code(code).ok_or_else(|| bad($what, code))?
    }};
}

/// Payload codec for one message type.
pub trait WireMessage: Sized {
    const TYPE: MessageType;

    fn encode_into(&self, w: &mut PayloadWriter);

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError>;

    fn encode_payload(&self) -> Vec<u8> {
        let mut w = PayloadWriter::new();
        self.encode_into(&mut w);
        w.finish()
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = PayloadReader::new(bytes);
        let out = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(out)
    }

    fn to_frame_bytes(&self) -> Vec<u8> {
        encode_frame(Self::TYPE, &self.encode_payload()).expect("control payloads are small")
    }
}

// ---------------------------------------------------------------------------
// handshake

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JoinRole {
    /// A peer registering with the master. `known_epoch` is 0 for a fresh
    /// peer, otherwise the epoch it previously belonged to.
    Client { p2p_port: u16, known_epoch: u64 },
    /// A p2p data connection from `from_peer`, pool slot `slot`.
    P2p { epoch: u64, from_peer: u64, slot: u32 },
    /// A short-lived bandwidth probe connection.
    Probe { epoch: u64, from_peer: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinRequest {
    pub version: u16,
    pub role: JoinRole,
}

impl WireMessage for JoinRequest {
    const TYPE: MessageType = MessageType::JoinRequest;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u16(self.version);
        match &self.role {
            JoinRole::Client { p2p_port, known_epoch } => {
                w.u8(0).u16(*p2p_port).u64(*known_epoch);
            }
            JoinRole::P2p { epoch, from_peer, slot } => {
                w.u8(1).u64(*epoch).u64(*from_peer).u32(*slot);
            }
            JoinRole::Probe { epoch, from_peer } => {
                w.u8(2).u64(*epoch).u64(*from_peer);
            }
        }
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        let version = r.u16()?;
        // a peer speaking another version may use another layout after the
        // version field, so leave the rest unparsed
        if version != super::PROTOCOL_VERSION {
            r.rest();
            return Ok(Self {
                version,
                role: JoinRole::Client {
                    p2p_port: 0,
                    known_epoch: 0,
                },
            });
        }
        let role = match r.u8()? {
            0 => JoinRole::Client {
                p2p_port: r.u16()?,
                known_epoch: r.u64()?,
            },
            1 => JoinRole::P2p {
                epoch: r.u64()?,
                from_peer: r.u64()?,
                slot: r.u32()?,
            },
            2 => JoinRole::Probe {
                epoch: r.u64()?,
                from_peer: r.u64()?,
            },
            c => return Err(bad("join role", c)),
        };
        Ok(Self { version, role })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinAssign {
    pub peer_id: u64,
    pub epoch: u64,
}

impl WireMessage for JoinAssign {
    const TYPE: MessageType = MessageType::JoinAssign;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.peer_id).u64(self.epoch);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            peer_id: r.u64()?,
            epoch: r.u64()?,
        })
    }
}

// ---------------------------------------------------------------------------
// votes and commits

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum VoteKind {
    UpdateTopology = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteRequest {
    pub kind: VoteKind,
}

impl WireMessage for VoteRequest {
    const TYPE: MessageType = MessageType::VoteRequest;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u8(self.kind as u8);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        match r.u8()? {
            1 => Ok(Self {
                kind: VoteKind::UpdateTopology,
            }),
            c => Err(bad("vote kind", c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteCast {
    pub tid: u64,
    pub yes: bool,
}

impl WireMessage for VoteCast {
    const TYPE: MessageType = MessageType::VoteCast;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.tid).bool(self.yes);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            tid: r.u64()?,
            yes: r.bool()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TopologyOutcome {
    Committed = 0,
    /// An accepted voter was lost; the call may be retried.
    Aborted = 1,
    /// Sent to a newcomer that could not be integrated this round.
    Rejected = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SyncVerdict {
    InSync = 0,
    Updated = 1,
    Failed = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitBody {
    Topology {
        outcome: TopologyOutcome,
        /// Accepted peers in ring order.
        ring: Vec<u64>,
        added: Vec<u64>,
        removed: Vec<u64>,
    },
    CollectiveInit {
        tag: u64,
        seq: u64,
        ring: Vec<u64>,
    },
    CollectiveComplete {
        tag: u64,
        seq: u64,
    },
    Sync {
        verdict: SyncVerdict,
        detail: String,
    },
    /// The request was illegal in the current group state.
    Rejected {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionCommit {
    pub tid: u64,
    pub body: CommitBody,
}

impl WireMessage for TransitionCommit {
    const TYPE: MessageType = MessageType::TransitionCommit;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.tid);
        match &self.body {
            CommitBody::Topology {
                outcome,
                ring,
                added,
                removed,
            } => {
                w.u8(0).u8(*outcome as u8).u64_list(ring).u64_list(added).u64_list(removed);
            }
            CommitBody::CollectiveInit { tag, seq, ring } => {
                w.u8(1).u64(*tag).u64(*seq).u64_list(ring);
            }
            CommitBody::CollectiveComplete { tag, seq } => {
                w.u8(2).u64(*tag).u64(*seq);
            }
            CommitBody::Sync { verdict, detail } => {
                w.u8(3).u8(*verdict as u8).str(detail);
            }
            CommitBody::Rejected { reason } => {
                w.u8(4).str(reason);
            }
        }
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        let tid = r.u64()?;
        let body = match r.u8()? {
            0 => {
                let outcome = match r.u8()? {
                    0 => TopologyOutcome::Committed,
                    1 => TopologyOutcome::Aborted,
                    2 => TopologyOutcome::Rejected,
                    c => return Err(bad("topology outcome", c)),
                };
                CommitBody::Topology {
                    outcome,
                    ring: r.u64_list()?,
                    added: r.u64_list()?,
                    removed: r.u64_list()?,
                }
            }
            1 => CommitBody::CollectiveInit {
                tag: r.u64()?,
                seq: r.u64()?,
                ring: r.u64_list()?,
            },
            2 => CommitBody::CollectiveComplete {
                tag: r.u64()?,
                seq: r.u64()?,
            },
            3 => {
                let verdict = match r.u8()? {
                    0 => SyncVerdict::InSync,
                    1 => SyncVerdict::Updated,
                    2 => SyncVerdict::Failed,
                    c => return Err(bad("sync verdict", c)),
                };
                CommitBody::Sync {
                    verdict,
                    detail: r.str()?,
                }
            }
            4 => CommitBody::Rejected { reason: r.str()? },
            c => return Err(bad("commit kind", c)),
        };
        Ok(Self { tid, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbortNotify {
    pub tag: u64,
    pub seq: u64,
    pub reason: AbortReason,
    /// Accepted peers that remain after the abort.
    pub remaining: Vec<u64>,
}

impl WireMessage for AbortNotify {
    const TYPE: MessageType = MessageType::AbortNotify;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.tag).u64(self.seq).u8(self.reason.code()).u64_list(&self.remaining);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            tag: r.u64()?,
            seq: r.u64()?,
            reason: read_enum!(r, AbortReason, "abort reason"),
            remaining: r.u64_list()?,
        })
    }
}

// ---------------------------------------------------------------------------
// topology

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerEndpoint {
    pub peer_id: u64,
    pub host: String,
    pub port: u16,
}

impl PeerEndpoint {
    pub fn addr(&self) -> String {
        if self.host.contains(':') {
            format!("[{}]:{}", self.host, self.port)
        } else {
            format!("{}:{}", self.host, self.port)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyAssign {
    pub tid: u64,
    pub members: Vec<PeerEndpoint>,
    pub newcomers: Vec<u64>,
    /// Peers the receiver must probe (directed, receiver → target).
    pub probe_targets: Vec<u64>,
    pub probe_bytes: u32,
}

impl WireMessage for TopologyAssign {
    const TYPE: MessageType = MessageType::TopologyAssign;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.tid).count(self.members.len());
        for m in &self.members {
            w.u64(m.peer_id).str(&m.host).u16(m.port);
        }
        w.u64_list(&self.newcomers).u64_list(&self.probe_targets).u32(self.probe_bytes);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        let tid = r.u64()?;
        let n = r.count(12)?;
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            members.push(PeerEndpoint {
                peer_id: r.u64()?,
                host: r.str()?,
                port: r.u16()?,
            });
        }
        Ok(Self {
            tid,
            members,
            newcomers: r.u64_list()?,
            probe_targets: r.u64_list()?,
            probe_bytes: r.u32()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandwidthProbeRequest {
    pub nonce: u64,
    pub data: Vec<u8>,
}

impl WireMessage for BandwidthProbeRequest {
    const TYPE: MessageType = MessageType::BandwidthProbeRequest;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.nonce).raw(&self.data);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            nonce: r.u64()?,
            data: r.rest().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthProbeReport {
    pub tid: u64,
    /// (target peer, bytes per second)
    pub measurements: Vec<(u64, f64)>,
    /// Peers this reporter could not connect to.
    pub failed: Vec<u64>,
}

impl WireMessage for BandwidthProbeReport {
    const TYPE: MessageType = MessageType::BandwidthProbeReport;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.tid).count(self.measurements.len());
        for (to, bps) in &self.measurements {
            w.u64(*to).f64(*bps);
        }
        w.u64_list(&self.failed);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        let tid = r.u64()?;
        let n = r.count(16)?;
        let mut measurements = Vec::with_capacity(n);
        for _ in 0..n {
            measurements.push((r.u64()?, r.f64()?));
        }
        Ok(Self {
            tid,
            measurements,
            failed: r.u64_list()?,
        })
    }
}

// ---------------------------------------------------------------------------
// shared state

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryReport {
    pub key: String,
    pub dtype: Dtype,
    pub byte_len: u64,
    pub revision: u64,
    pub hash: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedStateReport {
    pub strategy: SyncStrategy,
    pub entries: Vec<EntryReport>,
}

impl WireMessage for SharedStateReport {
    const TYPE: MessageType = MessageType::SharedStateReport;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u8(self.strategy.code()).count(self.entries.len());
        for e in &self.entries {
            w.str(&e.key).u8(e.dtype.code()).u64(e.byte_len).u64(e.revision).u64(e.hash);
        }
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        let strategy = read_enum!(r, SyncStrategy, "sync strategy");
        let n = r.count(27)?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push(EntryReport {
                key: r.str()?,
                dtype: read_enum!(r, Dtype, "dtype"),
                byte_len: r.u64()?,
                revision: r.u64()?,
                hash: r.u64()?,
            });
        }
        Ok(Self { strategy, entries })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    pub key: String,
    pub donor: u64,
    pub revision: u64,
    pub hash: u64,
    pub receivers: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedStatePlan {
    pub tid: u64,
    pub transfers: Vec<Transfer>,
}

impl WireMessage for SharedStatePlan {
    const TYPE: MessageType = MessageType::SharedStatePlan;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.tid).count(self.transfers.len());
        for t in &self.transfers {
            w.str(&t.key).u64(t.donor).u64(t.revision).u64(t.hash).u64_list(&t.receivers);
        }
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        let tid = r.u64()?;
        let n = r.count(30)?;
        let mut transfers = Vec::with_capacity(n);
        for _ in 0..n {
            transfers.push(Transfer {
                key: r.str()?,
                donor: r.u64()?,
                revision: r.u64()?,
                hash: r.u64()?,
                receivers: r.u64_list()?,
            });
        }
        Ok(Self { tid, transfers })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedStateChunk {
    pub tid: u64,
    pub key: String,
    pub total_len: u64,
    pub offset: u64,
    pub data: Vec<u8>,
}

impl WireMessage for SharedStateChunk {
    const TYPE: MessageType = MessageType::SharedStateChunk;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.tid).str(&self.key).u64(self.total_len).u64(self.offset).raw(&self.data);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            tid: r.u64()?,
            key: r.str()?,
            total_len: r.u64()?,
            offset: r.u64()?,
            data: r.rest().to_vec(),
        })
    }
}

// ---------------------------------------------------------------------------
// collectives

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectiveInitVote {
    pub tag: u64,
    pub byte_len: u64,
    pub dtype: Dtype,
    pub op: ReduceOp,
    pub quant: Quantization,
}

impl WireMessage for CollectiveInitVote {
    const TYPE: MessageType = MessageType::CollectiveInitVote;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.tag)
            .u64(self.byte_len)
            .u8(self.dtype.code())
            .u8(self.op.code())
            .u8(self.quant.code());
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            tag: r.u64()?,
            byte_len: r.u64()?,
            dtype: read_enum!(r, Dtype, "dtype"),
            op: read_enum!(r, ReduceOp, "reduce op"),
            quant: read_enum!(r, Quantization, "quantization"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectiveCompleteVote {
    pub tag: u64,
    pub seq: u64,
    pub ok: bool,
}

impl WireMessage for CollectiveCompleteVote {
    const TYPE: MessageType = MessageType::CollectiveCompleteVote;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.tag).u64(self.seq).bool(self.ok);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            tag: r.u64()?,
            seq: r.u64()?,
            ok: r.bool()?,
        })
    }
}

/// Fixed 32-byte prefix of every ChunkData payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChunkHeader {
    pub tag: u64,
    pub seq: u64,
    pub chunk_index: u32,
    pub byte_offset: u64,
    pub byte_len: u32,
}

impl ChunkHeader {
    pub const LEN: usize = 32;

    pub fn encode(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[0..8].copy_from_slice(&self.tag.to_be_bytes());
        out[8..16].copy_from_slice(&self.seq.to_be_bytes());
        out[16..20].copy_from_slice(&self.chunk_index.to_be_bytes());
        out[20..28].copy_from_slice(&self.byte_offset.to_be_bytes());
        out[28..32].copy_from_slice(&self.byte_len.to_be_bytes());
        out
    }

    pub fn decode(b: &[u8; Self::LEN]) -> Self {
        Self {
            tag: u64::from_be_bytes(b[0..8].try_into().unwrap()),
            seq: u64::from_be_bytes(b[8..16].try_into().unwrap()),
            chunk_index: u32::from_be_bytes(b[16..20].try_into().unwrap()),
            byte_offset: u64::from_be_bytes(b[20..28].try_into().unwrap()),
            byte_len: u32::from_be_bytes(b[28..32].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkData {
    pub header: ChunkHeader,
    pub data: Vec<u8>,
}

impl WireMessage for ChunkData {
    const TYPE: MessageType = MessageType::ChunkData;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.raw(&self.header.encode()).raw(&self.data);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        let rest = r.rest();
        if rest.len() < ChunkHeader::LEN {
            return Err(WireError::Malformed("chunk header truncated".into()));
        }
        let header = ChunkHeader::decode(rest[..ChunkHeader::LEN].try_into().unwrap());
        let data = rest[ChunkHeader::LEN..].to_vec();
        if data.len() != header.byte_len as usize {
            return Err(WireError::Malformed(format!(
                "chunk header says {} bytes, frame carries {}",
                header.byte_len,
                data.len()
            )));
        }
        Ok(Self { header, data })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkAck {
    pub nonce: u64,
}

impl WireMessage for ChunkAck {
    const TYPE: MessageType = MessageType::ChunkAck;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.nonce);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self { nonce: r.u64()? })
    }
}

/// Dequantization parameters for the ChunkData frame that follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantMetaMsg {
    pub tag: u64,
    pub seq: u64,
    pub chunk_index: u32,
    pub min: f32,
    pub scale: f32,
}

impl QuantMetaMsg {
    pub const LEN: usize = 28;

    pub fn encode(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[0..8].copy_from_slice(&self.tag.to_be_bytes());
        out[8..16].copy_from_slice(&self.seq.to_be_bytes());
        out[16..20].copy_from_slice(&self.chunk_index.to_be_bytes());
        out[20..24].copy_from_slice(&self.min.to_bits().to_be_bytes());
        out[24..28].copy_from_slice(&self.scale.to_bits().to_be_bytes());
        out
    }

    pub fn decode(b: &[u8; Self::LEN]) -> Self {
        Self {
            tag: u64::from_be_bytes(b[0..8].try_into().unwrap()),
            seq: u64::from_be_bytes(b[8..16].try_into().unwrap()),
            chunk_index: u32::from_be_bytes(b[16..20].try_into().unwrap()),
            min: f32::from_bits(u32::from_be_bytes(b[20..24].try_into().unwrap())),
            scale: f32::from_bits(u32::from_be_bytes(b[24..28].try_into().unwrap())),
        }
    }
}

impl WireMessage for QuantMetaMsg {
    const TYPE: MessageType = MessageType::QuantMeta;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.raw(&self.encode());
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        let rest = r.rest();
        let b: &[u8; Self::LEN] = rest
            .try_into()
            .map_err(|_| WireError::Malformed(format!("quant meta is {} bytes", rest.len())))?;
        Ok(Self::decode(b))
    }
}

// ---------------------------------------------------------------------------
// pending peers, goodbye

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingPeersQuery {
    pub query_id: u64,
}

impl WireMessage for PendingPeersQuery {
    const TYPE: MessageType = MessageType::PendingPeersQuery;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.query_id);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self { query_id: r.u64()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingPeersAnswer {
    pub query_id: u64,
    /// Master-side round number; identical for every peer in one round.
    pub round: u64,
    pub pending: bool,
}

impl WireMessage for PendingPeersAnswer {
    const TYPE: MessageType = MessageType::PendingPeersAnswer;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u64(self.query_id).u64(self.round).bool(self.pending);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            query_id: r.u64()?,
            round: r.u64()?,
            pending: r.bool()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ByeReason {
    Shutdown = 0,
    VersionMismatch = 1,
    EpochMismatch = 2,
    Protocol = 3,
    Leaving = 4,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bye {
    pub reason: ByeReason,
    pub message: String,
}

impl WireMessage for Bye {
    const TYPE: MessageType = MessageType::Bye;

    fn encode_into(&self, w: &mut PayloadWriter) {
        w.u8(self.reason as u8).str(&self.message);
    }

    fn decode_from(r: &mut PayloadReader<'_>) -> Result<Self, WireError> {
        let reason = match r.u8()? {
            0 => ByeReason::Shutdown,
            1 => ByeReason::VersionMismatch,
            2 => ByeReason::EpochMismatch,
            3 => ByeReason::Protocol,
            4 => ByeReason::Leaving,
            c => return Err(bad("bye reason", c)),
        };
        Ok(Self {
            reason,
            message: r.str()?,
        })
    }
}

// ---------------------------------------------------------------------------

/// Any decoded message.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    JoinRequest(JoinRequest),
    JoinAssign(JoinAssign),
    VoteRequest(VoteRequest),
    VoteCast(VoteCast),
    TransitionCommit(TransitionCommit),
    AbortNotify(AbortNotify),
    TopologyAssign(TopologyAssign),
    BandwidthProbeRequest(BandwidthProbeRequest),
    BandwidthProbeReport(BandwidthProbeReport),
    SharedStateReport(SharedStateReport),
    SharedStatePlan(SharedStatePlan),
    SharedStateChunk(SharedStateChunk),
    CollectiveInitVote(CollectiveInitVote),
    CollectiveCompleteVote(CollectiveCompleteVote),
    ChunkData(ChunkData),
    ChunkAck(ChunkAck),
    QuantMeta(QuantMetaMsg),
    PendingPeersQuery(PendingPeersQuery),
    PendingPeersAnswer(PendingPeersAnswer),
    Bye(Bye),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            Message::JoinRequest($m) => $body,
            Message::JoinAssign($m) => $body,
            Message::VoteRequest($m) => $body,
            Message::VoteCast($m) => $body,
            Message::TransitionCommit($m) => $body,
            Message::AbortNotify($m) => $body,
            Message::TopologyAssign($m) => $body,
            Message::BandwidthProbeRequest($m) => $body,
            Message::BandwidthProbeReport($m) => $body,
            Message::SharedStateReport($m) => $body,
            Message::SharedStatePlan($m) => $body,
            Message::SharedStateChunk($m) => $body,
            Message::CollectiveInitVote($m) => $body,
            Message::CollectiveCompleteVote($m) => $body,
            Message::ChunkData($m) => $body,
            Message::ChunkAck($m) => $body,
            Message::QuantMeta($m) => $body,
            Message::PendingPeersQuery($m) => $body,
            Message::PendingPeersAnswer($m) => $body,
            Message::Bye($m) => $body,
        }
    };
}

fn type_of<M: WireMessage>(_: &M) -> MessageType {
    M::TYPE
}

impl Message {
    pub fn msg_type(&self) -> MessageType {
        dispatch!(self, m => type_of(m))
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        dispatch!(self, m => m.encode_payload())
    }

    pub fn to_frame_bytes(&self) -> Vec<u8> {
        encode_frame(self.msg_type(), &self.encode_payload()).expect("message fits in a frame")
    }

    pub fn decode(msg_type: MessageType, payload: &[u8]) -> Result<Self, WireError> {
        Ok(match msg_type {
            MessageType::JoinRequest => Message::JoinRequest(JoinRequest::decode_payload(payload)?),
            MessageType::JoinAssign => Message::JoinAssign(JoinAssign::decode_payload(payload)?),
            MessageType::VoteRequest => Message::VoteRequest(VoteRequest::decode_payload(payload)?),
            MessageType::VoteCast => Message::VoteCast(VoteCast::decode_payload(payload)?),
            MessageType::TransitionCommit => Message::TransitionCommit(TransitionCommit::decode_payload(payload)?),
            MessageType::AbortNotify => Message::AbortNotify(AbortNotify::decode_payload(payload)?),
            MessageType::TopologyAssign => Message::TopologyAssign(TopologyAssign::decode_payload(payload)?),
            MessageType::BandwidthProbeRequest => {
                Message::BandwidthProbeRequest(BandwidthProbeRequest::decode_payload(payload)?)
            }
            MessageType::BandwidthProbeReport => {
                Message::BandwidthProbeReport(BandwidthProbeReport::decode_payload(payload)?)
            }
            MessageType::SharedStateReport => Message::SharedStateReport(SharedStateReport::decode_payload(payload)?),
            MessageType::SharedStatePlan => Message::SharedStatePlan(SharedStatePlan::decode_payload(payload)?),
            MessageType::SharedStateChunk => Message::SharedStateChunk(SharedStateChunk::decode_payload(payload)?),
            MessageType::CollectiveInitVote => {
                Message::CollectiveInitVote(CollectiveInitVote::decode_payload(payload)?)
            }
            MessageType::CollectiveCompleteVote => {
                Message::CollectiveCompleteVote(CollectiveCompleteVote::decode_payload(payload)?)
            }
            MessageType::ChunkData => Message::ChunkData(ChunkData::decode_payload(payload)?),
            MessageType::ChunkAck => Message::ChunkAck(ChunkAck::decode_payload(payload)?),
            MessageType::QuantMeta => Message::QuantMeta(QuantMetaMsg::decode_payload(payload)?),
            MessageType::PendingPeersQuery => Message::PendingPeersQuery(PendingPeersQuery::decode_payload(payload)?),
            MessageType::PendingPeersAnswer => {
                Message::PendingPeersAnswer(PendingPeersAnswer::decode_payload(payload)?)
            }
            MessageType::Bye => Message::Bye(Bye::decode_payload(payload)?),
        })
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, WireError> {
        Self::decode(frame.msg_type, &frame.payload)
    }
}

macro_rules! impl_from {
    ($($variant:ident($ty:ty)),+ $(,)?) => {
        $(impl From<$ty> for Message {
            fn from(m: $ty) -> Self {
                Message::$variant(m)
            }
        })+
    };
}

impl_from!(
    JoinRequest(JoinRequest),
    JoinAssign(JoinAssign),
    VoteRequest(VoteRequest),
    VoteCast(VoteCast),
    TransitionCommit(TransitionCommit),
    AbortNotify(AbortNotify),
    TopologyAssign(TopologyAssign),
    BandwidthProbeRequest(BandwidthProbeRequest),
    BandwidthProbeReport(BandwidthProbeReport),
    SharedStateReport(SharedStateReport),
    SharedStatePlan(SharedStatePlan),
    SharedStateChunk(SharedStateChunk),
    CollectiveInitVote(CollectiveInitVote),
    CollectiveCompleteVote(CollectiveCompleteVote),
    ChunkData(ChunkData),
    ChunkAck(ChunkAck),
    QuantMeta(QuantMetaMsg),
    PendingPeersQuery(PendingPeersQuery),
    PendingPeersAnswer(PendingPeersAnswer),
    Bye(Bye),
);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode_frame, PROTOCOL_VERSION};
    use proptest::prelude::*;

    fn samples() -> Vec<Message> {
        vec![
            JoinRequest {
                version: PROTOCOL_VERSION,
                role: JoinRole::Client {
                    p2p_port: 4242,
                    known_epoch: 0,
                },
            }
            .into(),
            JoinRequest {
                version: PROTOCOL_VERSION,
                role: JoinRole::P2p {
                    epoch: 9,
                    from_peer: 3,
                    slot: 2,
                },
            }
            .into(),
            JoinRequest {
                version: PROTOCOL_VERSION,
                role: JoinRole::Probe { epoch: 9, from_peer: 3 },
            }
            .into(),
            JoinAssign { peer_id: 1, epoch: 77 }.into(),
            VoteRequest {
                kind: VoteKind::UpdateTopology,
            }
            .into(),
            VoteCast { tid: 5, yes: true }.into(),
            TransitionCommit {
                tid: 5,
                body: CommitBody::Topology {
                    outcome: TopologyOutcome::Committed,
                    ring: vec![1, 3, 2],
                    added: vec![3],
                    removed: vec![],
                },
            }
            .into(),
            TransitionCommit {
                tid: 6,
                body: CommitBody::CollectiveInit {
                    tag: 1,
                    seq: 4,
                    ring: vec![2, 1],
                },
            }
            .into(),
            TransitionCommit {
                tid: 7,
                body: CommitBody::CollectiveComplete { tag: 1, seq: 4 },
            }
            .into(),
            TransitionCommit {
                tid: 8,
                body: CommitBody::Sync {
                    verdict: SyncVerdict::Failed,
                    detail: "donor lost".into(),
                },
            }
            .into(),
            TransitionCommit {
                tid: 9,
                body: CommitBody::Rejected { reason: "busy".into() },
            }
            .into(),
            AbortNotify {
                tag: 3,
                seq: 2,
                reason: AbortReason::PeerLost,
                remaining: vec![1, 2],
            }
            .into(),
            TopologyAssign {
                tid: 10,
                members: vec![PeerEndpoint {
                    peer_id: 1,
                    host: "127.0.0.1".into(),
                    port: 9000,
                }],
                newcomers: vec![1],
                probe_targets: vec![],
                probe_bytes: 1 << 22,
            }
            .into(),
            BandwidthProbeRequest {
                nonce: 3,
                data: vec![0; 17],
            }
            .into(),
            BandwidthProbeReport {
                tid: 10,
                measurements: vec![(2, 1.5e9)],
                failed: vec![4],
            }
            .into(),
            SharedStateReport {
                strategy: SyncStrategy::SendOnly,
                entries: vec![EntryReport {
                    key: "params".into(),
                    dtype: Dtype::F32,
                    byte_len: 16,
                    revision: 3,
                    hash: 0xdead_beef,
                }],
            }
            .into(),
            SharedStatePlan {
                tid: 11,
                transfers: vec![Transfer {
                    key: "params".into(),
                    donor: 1,
                    revision: 3,
                    hash: 7,
                    receivers: vec![2, 3],
                }],
            }
            .into(),
            SharedStateChunk {
                tid: 11,
                key: "params".into(),
                total_len: 8,
                offset: 4,
                data: vec![1, 2, 3, 4],
            }
            .into(),
            CollectiveInitVote {
                tag: 1,
                byte_len: 400,
                dtype: Dtype::F32,
                op: ReduceOp::Avg,
                quant: Quantization::MinMaxU8,
            }
            .into(),
            CollectiveCompleteVote {
                tag: 1,
                seq: 2,
                ok: false,
            }
            .into(),
            ChunkData {
                header: ChunkHeader {
                    tag: 1,
                    seq: 2,
                    chunk_index: 3,
                    byte_offset: 64,
                    byte_len: 3,
                },
                data: vec![9, 8, 7],
            }
            .into(),
            ChunkAck { nonce: 3 }.into(),
            QuantMetaMsg {
                tag: 1,
                seq: 2,
                chunk_index: 3,
                min: -1.5,
                scale: 0.25,
            }
            .into(),
            PendingPeersQuery { query_id: 4 }.into(),
            PendingPeersAnswer {
                query_id: 4,
                round: 2,
                pending: true,
            }
            .into(),
            Bye {
                reason: ByeReason::Shutdown,
                message: "bye".into(),
            }
            .into(),
        ]
    }

    #[test]
    fn every_sample_round_trips() {
        let all = samples();
        let mut seen = std::collections::BTreeSet::new();
        for m in all {
            seen.insert(m.msg_type());
            let bytes = m.to_frame_bytes();
            let (frame, used) = decode_frame(&bytes).unwrap();
            assert_eq!(used, bytes.len());
            assert_eq!(Message::from_frame(&frame).unwrap(), m);
        }
        assert_eq!(seen.len(), MessageType::ALL.len(), "a message type has no sample");
    }

    #[test]
    fn chunk_header_is_32_bytes_big_endian() {
        let h = ChunkHeader {
            tag: 1,
            seq: 2,
            chunk_index: 3,
            byte_offset: 4,
            byte_len: 5,
        };
        let b = h.encode();
        assert_eq!(b.len(), 32);
        assert_eq!(b[7], 1);
        assert_eq!(b[15], 2);
        assert_eq!(b[19], 3);
        assert_eq!(b[27], 4);
        assert_eq!(b[31], 5);
        assert_eq!(ChunkHeader::decode(&b), h);
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut p = VoteCast { tid: 1, yes: true }.encode_payload();
        p.push(0);
        assert!(VoteCast::decode_payload(&p).is_err());
    }

    #[test]
    fn foreign_version_parses_without_role() {
        let mut w = PayloadWriter::new();
        w.u16(PROTOCOL_VERSION + 1).u8(77);
        let p = w.finish();
        let j = JoinRequest::decode_payload(&p).unwrap();
        assert_eq!(j.version, PROTOCOL_VERSION + 1);
    }

    proptest! {
        #[test]
        fn chunk_header_round_trips(tag in any::<u64>(), seq in any::<u64>(), ci in any::<u32>(), off in any::<u64>(), len in any::<u32>()) {
            let h = ChunkHeader { tag, seq, chunk_index: ci, byte_offset: off, byte_len: len };
            prop_assert_eq!(ChunkHeader::decode(&h.encode()), h);
        }

        #[test]
        fn abort_notify_round_trips(tag in any::<u64>(), seq in any::<u64>(), rem in proptest::collection::vec(any::<u64>(), 0..20)) {
            let m = AbortNotify { tag, seq, reason: AbortReason::Timeout, remaining: rem };
            prop_assert_eq!(AbortNotify::decode_payload(&m.encode_payload()).unwrap(), m);
        }

        #[test]
        fn garbage_never_panics(code in 1u8..=20, payload in proptest::collection::vec(any::<u8>(), 0..80)) {
            let t = MessageType::from_code(code).unwrap();
            let _ = Message::decode(t, &payload);
        }
    }
}
