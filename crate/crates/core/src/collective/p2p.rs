//! Peer-to-peer transport: one listener per peer, one reader thread per
//! inbound connection, and one sender thread per outbound (peer, slot)
//! connection.
//!
//! Collective data is routed by tag into bounded per-tag queues. Senders
//! transmit straight from caller memory described by [`Piece`]s, so the data
//! path does not copy or allocate once pools are warm.

use std::collections::HashMap;
use std::io::{self, BufReader, IoSlice, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, SendTimeoutError, Sender};
use log::{debug, trace, warn};
use serde::Serialize;
use thiserror::Error;

use super::pool::{BufferPool, PooledBuf};
use crate::wire::{
    frame_header, read_frame_limited, read_header, Bye, ByeReason, ChunkAck, ChunkHeader, JoinAssign, JoinRequest,
    JoinRole, Message, MessageType, QuantMetaMsg, SharedStateChunk, WireError, WireMessage, FRAME_HEADER_LEN,
    PROTOCOL_VERSION,
};

#[derive(Debug, Error)]
pub enum P2pError {
    #[error("no endpoint known for peer {0}")]
    UnknownPeer(u64),
    #[error("connecting to peer {peer} at {addr}: {source}")]
    Connect {
        peer: u64,
        addr: String,
        source: io::Error,
    },
    #[error("peer {peer} rejected the connection: {reason}")]
    Rejected { peer: u64, reason: String },
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("node has crashed or shut down")]
    Down,
}

#[derive(Debug, Clone)]
pub struct P2pConfig {
    /// Address the listener binds, e.g. `127.0.0.1:0`.
    pub bind_addr: String,
    /// Pipelining granularity inside a ring step.
    pub net_chunk_bytes: usize,
    pub connect_timeout: Duration,
    /// Capacity of each per-tag receive queue, in frames.
    pub route_capacity: usize,
}

impl Default for P2pConfig {
    fn default() -> Self {
        Self {
            bind_addr: "127.0.0.1:0".into(),
            net_chunk_bytes: 256 * 1024,
            connect_timeout: Duration::from_secs(5),
            route_capacity: 1024,
        }
    }
}

/// Byte counters for one node.
#[derive(Debug, Default)]
pub struct TrafficStats {
    pub payload_tx: AtomicU64,
    pub payload_rx: AtomicU64,
    pub wire_tx: AtomicU64,
    pub wire_rx: AtomicU64,
    pub sync_tx: AtomicU64,
    pub sync_rx: AtomicU64,
    pub data_frames_tx: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrafficSnapshot {
    pub payload_tx: u64,
    pub payload_rx: u64,
    pub wire_tx: u64,
    pub wire_rx: u64,
    pub sync_tx: u64,
    pub sync_rx: u64,
    pub data_frames_tx: u64,
}

impl TrafficSnapshot {
    pub fn since(&self, earlier: &TrafficSnapshot) -> TrafficSnapshot {
        TrafficSnapshot {
            payload_tx: self.payload_tx - earlier.payload_tx,
            payload_rx: self.payload_rx - earlier.payload_rx,
            wire_tx: self.wire_tx - earlier.wire_tx,
            wire_rx: self.wire_rx - earlier.wire_rx,
            sync_tx: self.sync_tx - earlier.sync_tx,
            sync_rx: self.sync_rx - earlier.sync_rx,
            data_frames_tx: self.data_frames_tx - earlier.data_frames_tx,
        }
    }
}

impl TrafficStats {
    pub fn snapshot(&self) -> TrafficSnapshot {
        TrafficSnapshot {
            payload_tx: self.payload_tx.load(Ordering::Relaxed),
            payload_rx: self.payload_rx.load(Ordering::Relaxed),
            wire_tx: self.wire_tx.load(Ordering::Relaxed),
            wire_rx: self.wire_rx.load(Ordering::Relaxed),
            sync_tx: self.sync_tx.load(Ordering::Relaxed),
            sync_rx: self.sync_rx.load(Ordering::Relaxed),
            data_frames_tx: self.data_frames_tx.load(Ordering::Relaxed),
        }
    }
}

/// Something arriving on a tag's receive queue.
#[derive(Debug)]
pub enum RxItem {
    Data {
        from: u64,
        header: ChunkHeader,
        buf: PooledBuf,
    },
    Meta {
        from: u64,
        meta: QuantMetaMsg,
    },
    /// The inbound connection from `from` failed.
    Lost { from: u64 },
}

/// Receive queue for one tag. Frames for an inactive route are dropped.
#[derive(Debug)]
pub struct Route {
    pub tag: u64,
    active: AtomicBool,
    tx: Sender<RxItem>,
    rx: Receiver<RxItem>,
}

impl Route {
    fn new(tag: u64, capacity: usize) -> Self {
        let (tx, rx) = bounded(capacity);
        Self {
            tag,
            active: AtomicBool::new(true),
            tx,
            rx,
        }
    }

    pub fn activate(&self) {
        self.active.store(true, Ordering::SeqCst);
    }

    /// Stops accepting frames and discards whatever is queued.
    pub fn deactivate(&self) {
        self.active.store(false, Ordering::SeqCst);
        while self.rx.try_recv().is_ok() {}
    }

    pub fn is_active(&self) -> bool {
        self.active.load(Ordering::SeqCst)
    }

    pub fn receiver(&self) -> &Receiver<RxItem> {
        &self.rx
    }
}

/// One ChunkData frame to send, optionally preceded by a QuantMeta frame.
/// `ptr..ptr+len` must stay valid and unmodified until the job completes.
#[derive(Debug, Clone, Copy)]
pub struct Piece {
    pub header: ChunkHeader,
    pub meta: Option<QuantMetaMsg>,
    pub ptr: *const u8,
    pub len: usize,
}

pub type SendResult = Result<(), String>;

enum JobBody {
    Pieces { ptr: *const Piece, n: usize },
    Frame(Vec<u8>),
}

struct SendJob {
    body: JobBody,
    cancel: Option<Arc<AtomicBool>>,
    done: Sender<SendResult>,
}

// SAFETY: the raw pointers describe memory the submitter keeps alive and
// untouched until it has received on `done`.
unsafe impl Send for SendJob {}

/// Outbound connection to one peer on one pool slot.
pub struct OutConn {
    pub peer: u64,
    pub slot: u32,
    jobs: Sender<SendJob>,
    stream: TcpStream,
    broken: Arc<AtomicBool>,
    sent: Arc<AtomicU64>,
}

/// Payload bytes sent over one outbound connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ConnUsage {
    pub peer: u64,
    pub slot: u32,
    pub payload_tx: u64,
}

impl std::fmt::Debug for OutConn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OutConn").field("peer", &self.peer).field("slot", &self.slot).finish()
    }
}

impl OutConn {
    /// Queues the pieces for sending.
    ///
    /// # Safety
    /// `pieces` and every region they point at must stay valid and
    /// unmodified until a result has been received on `done`.
    pub unsafe fn submit_pieces(
        &self,
        pieces: &[Piece],
        cancel: &Arc<AtomicBool>,
        done: &Sender<SendResult>,
    ) -> Result<(), SendResult> {
        let job = SendJob {
            body: JobBody::Pieces {
                ptr: pieces.as_ptr(),
                n: pieces.len(),
            },
            cancel: Some(Arc::clone(cancel)),
            done: done.clone(),
        };
        self.jobs.send(job).map_err(|_| Err("sender thread gone".to_string()))
    }

    /// Queues a pre-encoded frame.
    pub fn submit_frame(&self, frame: Vec<u8>, done: &Sender<SendResult>) -> Result<(), SendResult> {
        let job = SendJob {
            body: JobBody::Frame(frame),
            cancel: None,
            done: done.clone(),
        };
        self.jobs.send(job).map_err(|_| Err("sender thread gone".to_string()))
    }

    pub fn payload_sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }

    pub fn is_broken(&self) -> bool {
        self.broken.load(Ordering::SeqCst)
    }

    /// Forces any blocked write to fail.
    pub fn shutdown(&self) {
        self.broken.store(true, Ordering::SeqCst);
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

type Hook = Box<dyn Fn() + Send + Sync>;

struct NodeInner {
    cfg: P2pConfig,
    local_addr: SocketAddr,
    peer_id: AtomicU64,
    epoch: AtomicU64,
    endpoints: RwLock<HashMap<u64, String>>,
    routes: RwLock<HashMap<u64, Arc<Route>>>,
    outbound: Mutex<HashMap<(u64, u32), Arc<OutConn>>>,
    inbound: Mutex<HashMap<u64, TcpStream>>,
    next_conn_id: AtomicU64,
    pool: Arc<BufferPool>,
    stats: TrafficStats,
    sync_tx: Sender<(u64, SharedStateChunk)>,
    sync_rx: Receiver<(u64, SharedStateChunk)>,
    down: AtomicBool,
    crash_after: AtomicU64,
    crash_hook: Mutex<Option<Hook>>,
}

/// A peer's p2p endpoint.
pub struct P2pNode {
    inner: Arc<NodeInner>,
}

impl std::fmt::Debug for P2pNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("P2pNode")
            .field("addr", &self.inner.local_addr)
            .field("peer_id", &self.peer_id())
            .finish()
    }
}

const POLL: Duration = Duration::from_millis(50);

impl P2pNode {
    pub fn bind(cfg: P2pConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(&cfg.bind_addr)?;
        let local_addr = listener.local_addr()?;
        let (sync_tx, sync_rx) = unbounded();
        let inner = Arc::new(NodeInner {
            pool: BufferPool::new(cfg.net_chunk_bytes),
            cfg,
            local_addr,
            peer_id: AtomicU64::new(0),
            epoch: AtomicU64::new(0),
            endpoints: RwLock::new(HashMap::new()),
            routes: RwLock::new(HashMap::new()),
            outbound: Mutex::new(HashMap::new()),
            inbound: Mutex::new(HashMap::new()),
            next_conn_id: AtomicU64::new(1),
            stats: TrafficStats::default(),
            sync_tx,
            sync_rx,
            down: AtomicBool::new(false),
            crash_after: AtomicU64::new(u64::MAX),
            crash_hook: Mutex::new(None),
        });
        let acc = Arc::clone(&inner);
        thread::Builder::new()
            .name("p2p-accept".into())
            .spawn(move || accept_loop(acc, listener))?;
        Ok(Self { inner })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local_addr
    }

    pub fn set_identity(&self, peer_id: u64, epoch: u64) {
        self.inner.peer_id.store(peer_id, Ordering::SeqCst);
        self.inner.epoch.store(epoch, Ordering::SeqCst);
    }

    pub fn peer_id(&self) -> u64 {
        self.inner.peer_id.load(Ordering::SeqCst)
    }

    pub fn epoch(&self) -> u64 {
        self.inner.epoch.load(Ordering::SeqCst)
    }

    pub fn net_chunk_bytes(&self) -> usize {
        self.inner.cfg.net_chunk_bytes
    }

    pub fn set_endpoint(&self, peer: u64, addr: String) {
        self.inner.endpoints.write().unwrap().insert(peer, addr);
    }

    pub fn endpoint(&self, peer: u64) -> Option<String> {
        self.inner.endpoints.read().unwrap().get(&peer).cloned()
    }

    /// Closes outbound connections to `peer` and forgets its endpoint.
    pub fn remove_peer(&self, peer: u64) {
        self.inner.endpoints.write().unwrap().remove(&peer);
        let mut out = self.inner.outbound.lock().unwrap();
        out.retain(|&(p, _), c| {
            if p == peer {
                c.shutdown();
                false
            } else {
                true
            }
        });
    }

    /// Receive queue for `tag`, created active on first use.
    pub fn route(&self, tag: u64) -> Arc<Route> {
        self.inner.route(tag)
    }

    /// Existing or freshly established connection to `peer` on `slot`.
    pub fn connection(&self, peer: u64, slot: u32) -> Result<Arc<OutConn>, P2pError> {
        connection(&self.inner, peer, slot)
    }

    /// Times a one-directional transfer of `bytes` to `peer`, in bytes/s.
    pub fn probe(&self, peer: u64, bytes: u32) -> Result<f64, P2pError> {
        probe(&self.inner, peer, bytes)
    }

    /// Per-connection payload counters of the live outbound connections.
    pub fn connection_usage(&self) -> Vec<ConnUsage> {
        let mut v: Vec<ConnUsage> = self
            .inner
            .outbound
            .lock()
            .unwrap()
            .values()
            .map(|c| ConnUsage {
                peer: c.peer,
                slot: c.slot,
                payload_tx: c.payload_sent(),
            })
            .collect();
        v.sort_by_key(|u| (u.peer, u.slot));
        v
    }

    pub fn sync_inbox(&self) -> &Receiver<(u64, SharedStateChunk)> {
        &self.inner.sync_rx
    }

    pub fn stats(&self) -> &TrafficStats {
        &self.inner.stats
    }

    pub fn pool(&self) -> &Arc<BufferPool> {
        &self.inner.pool
    }

    /// Hard-stop the node once `frames` data frames have been sent.
    pub fn set_crash_after_frames(&self, frames: Option<u64>) {
        let sent = self.inner.stats.data_frames_tx.load(Ordering::SeqCst);
        let at = frames.map_or(u64::MAX, |f| sent.saturating_add(f));
        self.inner.crash_after.store(at, Ordering::SeqCst);
    }

    /// Called once when the node crashes, before sockets are torn down.
    pub fn set_crash_hook(&self, hook: impl Fn() + Send + Sync + 'static) {
        *self.inner.crash_hook.lock().unwrap() = Some(Box::new(hook));
    }

    pub fn is_down(&self) -> bool {
        self.inner.down.load(Ordering::SeqCst)
    }

    /// Abrupt stop: runs the crash hook and closes every socket without Bye.
    pub fn crash(&self) {
        self.inner.crash();
    }

    pub fn shutdown(&self) {
        self.inner.go_down();
    }
}

impl Drop for P2pNode {
    fn drop(&mut self) {
        self.inner.go_down();
    }
}

impl NodeInner {
    fn route(&self, tag: u64) -> Arc<Route> {
        if let Some(r) = self.routes.read().unwrap().get(&tag) {
            return Arc::clone(r);
        }
        let mut routes = self.routes.write().unwrap();
        Arc::clone(
            routes
                .entry(tag)
                .or_insert_with(|| Arc::new(Route::new(tag, self.cfg.route_capacity))),
        )
    }

    fn is_down(&self) -> bool {
        self.down.load(Ordering::SeqCst)
    }

    fn crash(&self) {
        if self.down.load(Ordering::SeqCst) {
            return;
        }
        warn!("p2p node {} crashing", self.peer_id.load(Ordering::SeqCst));
        if let Some(h) = self.crash_hook.lock().unwrap().as_ref() {
            h();
        }
        self.go_down();
    }

    fn go_down(&self) {
        if self.down.swap(true, Ordering::SeqCst) {
            return;
        }
        for (_, c) in self.outbound.lock().unwrap().drain() {
            c.shutdown();
        }
        for (_, s) in self.inbound.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        // wake the accept loop so it drops the listener
        let _ = TcpStream::connect_timeout(&self.local_addr, Duration::from_millis(200));
    }

    fn notify_lost(&self, from: u64) {
        for r in self.routes.read().unwrap().values() {
            if r.is_active() {
                let _ = r.tx.try_send(RxItem::Lost { from });
            }
        }
    }
}

fn accept_loop(inner: Arc<NodeInner>, listener: TcpListener) {
    for stream in listener.incoming() {
        if inner.is_down() {
            break;
        }
        let Ok(stream) = stream else { continue };
        let id = inner.next_conn_id.fetch_add(1, Ordering::Relaxed);
        if let Ok(clone) = stream.try_clone() {
            inner.inbound.lock().unwrap().insert(id, clone);
        }
        let inn = Arc::clone(&inner);
        let spawned = thread::Builder::new().name("p2p-rx".into()).spawn(move || {
            if let Err(e) = serve_inbound(&inn, stream) {
                trace!("inbound connection ended: {e}");
            }
            inn.inbound.lock().unwrap().remove(&id);
        });
        if spawned.is_err() {
            warn!("could not spawn p2p reader thread");
        }
    }
    debug!("p2p listener {} closed", inner.local_addr);
}

fn send_bye(stream: &mut TcpStream, reason: ByeReason, message: &str) {
    let bye = Bye {
        reason,
        message: message.into(),
    };
    let _ = stream.write_all(&bye.to_frame_bytes());
}

fn serve_inbound(inner: &Arc<NodeInner>, stream: TcpStream) -> Result<(), P2pError> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::with_capacity(64 * 1024, stream);

    let first = read_frame_limited(&mut reader, 4096)?;
    let Message::JoinRequest(req) = Message::from_frame(&first)? else {
        send_bye(&mut writer, ByeReason::Protocol, "expected JoinRequest");
        return Err(P2pError::Rejected {
            peer: 0,
            reason: "first frame was not a JoinRequest".into(),
        });
    };
    if req.version != PROTOCOL_VERSION {
        send_bye(&mut writer, ByeReason::VersionMismatch, "protocol version mismatch");
        return Ok(());
    }
    let my_epoch = inner.epoch.load(Ordering::SeqCst);
    let from = match req.role {
        JoinRole::P2p { epoch, from_peer, .. } | JoinRole::Probe { epoch, from_peer } => {
            if epoch != my_epoch || my_epoch == 0 {
                send_bye(&mut writer, ByeReason::EpochMismatch, "epoch mismatch");
                return Ok(());
            }
            from_peer
        }
        JoinRole::Client { .. } => {
            send_bye(&mut writer, ByeReason::Protocol, "not a master");
            return Ok(());
        }
    };
    let ack = JoinAssign {
        peer_id: inner.peer_id.load(Ordering::SeqCst),
        epoch: my_epoch,
    };
    writer.write_all(&ack.to_frame_bytes())?;

    let result = inbound_loop(inner, &mut reader, &mut writer, from);
    match &result {
        Ok(()) => {}
        Err(_) if inner.is_down() => {}
        Err(e) => {
            debug!("inbound from peer {from} failed: {e}");
            inner.notify_lost(from);
        }
    }
    result
}

fn inbound_loop(
    inner: &Arc<NodeInner>,
    reader: &mut BufReader<TcpStream>,
    writer: &mut TcpStream,
    from: u64,
) -> Result<(), P2pError> {
    let stats = &inner.stats;
    loop {
        let (msg_type, len) = match read_header(reader) {
            Ok(h) => h,
            Err(WireError::Closed) => return Err(P2pError::Wire(WireError::Closed)),
            Err(e) => return Err(e.into()),
        };
        stats.wire_rx.fetch_add((FRAME_HEADER_LEN + len) as u64, Ordering::Relaxed);
        match msg_type {
            MessageType::ChunkData => {
                if len < ChunkHeader::LEN {
                    return Err(WireError::Malformed("short ChunkData".into()).into());
                }
                let mut hb = [0u8; ChunkHeader::LEN];
                reader.read_exact(&mut hb)?;
                let header = ChunkHeader::decode(&hb);
                let data_len = len - ChunkHeader::LEN;
                if header.byte_len as usize != data_len {
                    return Err(WireError::Malformed("ChunkData length disagrees with header".into()).into());
                }
                let mut buf = inner.pool.take(data_len);
                reader.read_exact(&mut buf)?;
                stats.payload_rx.fetch_add(data_len as u64, Ordering::Relaxed);
                deliver(inner, header.tag, RxItem::Data { from, header, buf });
            }
            MessageType::QuantMeta => {
                if len != QuantMetaMsg::LEN {
                    return Err(WireError::Malformed("bad QuantMeta length".into()).into());
                }
                let mut mb = [0u8; QuantMetaMsg::LEN];
                reader.read_exact(&mut mb)?;
                let meta = QuantMetaMsg::decode(&mb);
                deliver(inner, meta.tag, RxItem::Meta { from, meta });
            }
            MessageType::SharedStateChunk => {
                let mut payload = vec![0u8; len];
                reader.read_exact(&mut payload)?;
                let chunk = SharedStateChunk::decode_payload(&payload)?;
                stats.sync_rx.fetch_add(chunk.data.len() as u64, Ordering::Relaxed);
                let _ = inner.sync_tx.send((from, chunk));
            }
            MessageType::BandwidthProbeRequest => {
                if len < 8 {
                    return Err(WireError::Malformed("short probe".into()).into());
                }
                let mut nb = [0u8; 8];
                reader.read_exact(&mut nb)?;
                let copied = io::copy(&mut reader.by_ref().take((len - 8) as u64), &mut io::sink())?;
                if copied != (len - 8) as u64 {
                    return Err(WireError::Incomplete {
                        needed: len - 8 - copied as usize,
                    }
                    .into());
                }
                let ack = ChunkAck {
                    nonce: u64::from_be_bytes(nb),
                };
                writer.write_all(&ack.to_frame_bytes())?;
            }
            MessageType::Bye => return Ok(()),
            other => {
                return Err(WireError::Malformed(format!("unexpected {other:?} on p2p connection")).into());
            }
        }
    }
}

fn deliver(inner: &NodeInner, tag: u64, mut item: RxItem) {
    let route = inner.route(tag);
    loop {
        if !route.is_active() || inner.is_down() {
            return;
        }
        match route.tx.send_timeout(item, POLL) {
            Ok(()) => return,
            Err(SendTimeoutError::Timeout(back)) => item = back,
            Err(SendTimeoutError::Disconnected(_)) => return,
        }
    }
}

fn resolve(inner: &NodeInner, peer: u64) -> Result<(String, SocketAddr), P2pError> {
    let addr = inner
        .endpoints
        .read()
        .unwrap()
        .get(&peer)
        .cloned()
        .ok_or(P2pError::UnknownPeer(peer))?;
    let sock = addr
        .to_socket_addrs()
        .map_err(|source| P2pError::Connect {
            peer,
            addr: addr.clone(),
            source,
        })?
        .next()
        .ok_or_else(|| P2pError::Connect {
            peer,
            addr: addr.clone(),
            source: io::Error::new(io::ErrorKind::NotFound, "address did not resolve"),
        })?;
    Ok((addr, sock))
}

fn open_stream(inner: &NodeInner, peer: u64, role: JoinRole) -> Result<TcpStream, P2pError> {
    if inner.is_down() {
        return Err(P2pError::Down);
    }
    let (addr, sock) = resolve(inner, peer)?;
    let timeout = inner.cfg.connect_timeout;
    let mut stream = TcpStream::connect_timeout(&sock, timeout).map_err(|source| P2pError::Connect {
        peer,
        addr: addr.clone(),
        source,
    })?;
    stream.set_nodelay(true)?;
    let req = JoinRequest {
        version: PROTOCOL_VERSION,
        role,
    };
    stream.write_all(&req.to_frame_bytes())?;
    stream.set_read_timeout(Some(timeout))?;
    let reply = read_frame_limited(&mut stream, 4096)?;
    stream.set_read_timeout(None)?;
    match Message::from_frame(&reply)? {
        Message::JoinAssign(a) if a.peer_id == peer && a.epoch == inner.epoch.load(Ordering::SeqCst) => Ok(stream),
        Message::JoinAssign(a) => Err(P2pError::Rejected {
            peer,
            reason: format!("expected peer {peer}, reached peer {} of epoch {}", a.peer_id, a.epoch),
        }),
        Message::Bye(b) => Err(P2pError::Rejected {
            peer,
            reason: b.message,
        }),
        other => Err(P2pError::Rejected {
            peer,
            reason: format!("unexpected {:?} during handshake", other.msg_type()),
        }),
    }
}

fn connection(inner: &Arc<NodeInner>, peer: u64, slot: u32) -> Result<Arc<OutConn>, P2pError> {
    if let Some(c) = inner.outbound.lock().unwrap().get(&(peer, slot)) {
        if !c.is_broken() {
            return Ok(Arc::clone(c));
        }
    }
    let stream = open_stream(
        inner,
        peer,
        JoinRole::P2p {
            epoch: inner.epoch.load(Ordering::SeqCst),
            from_peer: inner.peer_id.load(Ordering::SeqCst),
            slot,
        },
    )?;
    let (jobs_tx, jobs_rx) = bounded::<SendJob>(64);
    let broken = Arc::new(AtomicBool::new(false));
    let sent = Arc::new(AtomicU64::new(0));
    let conn = Arc::new(OutConn {
        peer,
        slot,
        jobs: jobs_tx,
        stream: stream.try_clone()?,
        broken: Arc::clone(&broken),
        sent: Arc::clone(&sent),
    });
    let inn = Arc::clone(inner);
    thread::Builder::new()
        .name(format!("p2p-tx-{peer}-{slot}"))
        .spawn(move || sender_loop(inn, stream, jobs_rx, broken, sent))?;
    let mut out = inner.outbound.lock().unwrap();
    if inner.is_down() {
        conn.shutdown();
        return Err(P2pError::Down);
    }
    // a concurrent caller may have connected first; keep the newest
    if let Some(old) = out.insert((peer, slot), Arc::clone(&conn)) {
        if !Arc::ptr_eq(&old, &conn) && old.is_broken() {
            old.shutdown();
        }
    }
    Ok(conn)
}

fn write_all_vectored(w: &mut TcpStream, mut bufs: &mut [IoSlice<'_>]) -> io::Result<()> {
    IoSlice::advance_slices(&mut bufs, 0);
    while !bufs.is_empty() {
        match w.write_vectored(bufs) {
            Ok(0) => return Err(io::ErrorKind::WriteZero.into()),
            Ok(n) => IoSlice::advance_slices(&mut bufs, n),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn send_piece(inner: &NodeInner, stream: &mut TcpStream, p: &Piece, sent: &AtomicU64) -> io::Result<()> {
    let frame_no = inner.stats.data_frames_tx.fetch_add(1, Ordering::SeqCst);
    if frame_no >= inner.crash_after.load(Ordering::SeqCst) {
        inner.stats.data_frames_tx.fetch_sub(1, Ordering::SeqCst);
        inner.crash();
        return Err(io::Error::new(io::ErrorKind::ConnectionAborted, "injected crash"));
    }
    let mut meta_frame = [0u8; FRAME_HEADER_LEN + QuantMetaMsg::LEN];
    let meta_len = if let Some(m) = &p.meta {
        let h = frame_header(MessageType::QuantMeta, QuantMetaMsg::LEN).expect("small");
        meta_frame[..FRAME_HEADER_LEN].copy_from_slice(&h);
        meta_frame[FRAME_HEADER_LEN..].copy_from_slice(&m.encode());
        meta_frame.len()
    } else {
        0
    };
    let mut head = [0u8; FRAME_HEADER_LEN + ChunkHeader::LEN];
    let h = frame_header(MessageType::ChunkData, ChunkHeader::LEN + p.len)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    head[..FRAME_HEADER_LEN].copy_from_slice(&h);
    head[FRAME_HEADER_LEN..].copy_from_slice(&p.header.encode());
    // SAFETY: guaranteed by the submitter of the job
    let data: &[u8] = if p.len == 0 {
        &[]
    } else {
        unsafe { std::slice::from_raw_parts(p.ptr, p.len) }
    };
    let mut slices = [
        IoSlice::new(&meta_frame[..meta_len]),
        IoSlice::new(&head),
        IoSlice::new(data),
    ];
    write_all_vectored(stream, &mut slices)?;
    let st = &inner.stats;
    st.payload_tx.fetch_add(p.len as u64, Ordering::Relaxed);
    sent.fetch_add(p.len as u64, Ordering::Relaxed);
    st.wire_tx.fetch_add((meta_len + head.len() + p.len) as u64, Ordering::Relaxed);
    Ok(())
}

fn sender_loop(
    inner: Arc<NodeInner>,
    mut stream: TcpStream,
    jobs: Receiver<SendJob>,
    broken: Arc<AtomicBool>,
    sent: Arc<AtomicU64>,
) {
    while let Ok(job) = jobs.recv() {
        let result = if broken.load(Ordering::SeqCst) || inner.is_down() {
            Err("connection is down".to_string())
        } else {
            run_job(&inner, &mut stream, &job, &sent)
        };
        if matches!(&result, Err(e) if e != "cancelled") {
            broken.store(true, Ordering::SeqCst);
            let _ = stream.shutdown(Shutdown::Both);
        }
        let _ = job.done.send(result);
    }
}

fn run_job(inner: &NodeInner, stream: &mut TcpStream, job: &SendJob, sent: &AtomicU64) -> SendResult {
    match &job.body {
        JobBody::Pieces { ptr, n } => {
            // SAFETY: see `OutConn::submit_pieces`
            let pieces = unsafe { std::slice::from_raw_parts(*ptr, *n) };
            for p in pieces {
                if job.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst)) {
                    return Err("cancelled".into());
                }
                send_piece(inner, stream, p, sent).map_err(|e| e.to_string())?;
            }
            Ok(())
        }
        JobBody::Frame(bytes) => {
            stream.write_all(bytes).map_err(|e| e.to_string())?;
            inner.stats.wire_tx.fetch_add(bytes.len() as u64, Ordering::Relaxed);
            Ok(())
        }
    }
}

static ZEROS: [u8; 64 * 1024] = [0; 64 * 1024];

fn probe(inner: &Arc<NodeInner>, peer: u64, bytes: u32) -> Result<f64, P2pError> {
    let mut stream = open_stream(
        inner,
        peer,
        JoinRole::Probe {
            epoch: inner.epoch.load(Ordering::SeqCst),
            from_peer: inner.peer_id.load(Ordering::SeqCst),
        },
    )?;
    let nonce = rand::random::<u64>();
    let start = Instant::now();
    stream.write_all(&frame_header(MessageType::BandwidthProbeRequest, 8 + bytes as usize)?)?;
    stream.write_all(&nonce.to_be_bytes())?;
    let mut left = bytes as usize;
    while left > 0 {
        let n = left.min(ZEROS.len());
        stream.write_all(&ZEROS[..n])?;
        left -= n;
    }
    stream.set_read_timeout(Some(inner.cfg.connect_timeout.max(Duration::from_secs(10))))?;
    let reply = read_frame_limited(&mut stream, 64)?;
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    match Message::from_frame(&reply)? {
        Message::ChunkAck(a) if a.nonce == nonce => {
            let _ = stream.write_all(
                &Bye {
                    reason: ByeReason::Leaving,
                    message: String::new(),
                }
                .to_frame_bytes(),
            );
            Ok(bytes as f64 / secs)
        }
        other => Err(P2pError::Rejected {
            peer,
            reason: format!("unexpected {:?} in reply to probe", other.msg_type()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (P2pNode, P2pNode) {
        let a = P2pNode::bind(P2pConfig::default()).unwrap();
        let b = P2pNode::bind(P2pConfig::default()).unwrap();
        a.set_identity(1, 42);
        b.set_identity(2, 42);
        a.set_endpoint(2, b.local_addr().to_string());
        b.set_endpoint(1, a.local_addr().to_string());
        (a, b)
    }

    #[test]
    fn pieces_arrive_on_route() {
        let (a, b) = pair();
        let route = b.route(7);
        let data = vec![1u8, 2, 3, 4, 5];
        let pieces = [Piece {
            header: ChunkHeader {
                tag: 7,
                seq: 1,
                chunk_index: 0,
                byte_offset: 0,
                byte_len: 5,
            },
            meta: None,
            ptr: data.as_ptr(),
            len: data.len(),
        }];
        let conn = a.connection(2, 0).unwrap();
        let (done_tx, done_rx) = bounded(1);
        let cancel = Arc::new(AtomicBool::new(false));
        unsafe { conn.submit_pieces(&pieces, &cancel, &done_tx).unwrap() };
        done_rx.recv().unwrap().unwrap();
        match route.receiver().recv_timeout(Duration::from_secs(5)).unwrap() {
            RxItem::Data { from, header, buf } => {
                assert_eq!(from, 1);
                assert_eq!(header.seq, 1);
                assert_eq!(&buf[..], &data[..]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(a.stats().snapshot().payload_tx, 5);
        assert_eq!(b.stats().snapshot().payload_rx, 5);
    }

    #[test]
    fn epoch_mismatch_rejected() {
        let (a, b) = pair();
        b.set_identity(2, 43);
        assert!(matches!(a.connection(2, 0), Err(P2pError::Rejected { .. })));
    }

    #[test]
    fn probe_measures_loopback() {
        let (a, _b) = pair();
        let bps = a.probe(2, 4 << 20).unwrap();
        assert!(bps > 100e6, "loopback probe only {bps} B/s");
    }

    #[test]
    fn probe_to_dead_peer_fails() {
        let (a, b) = pair();
        drop(b);
        thread::sleep(Duration::from_millis(50));
        assert!(a.probe(2, 1 << 16).is_err());
    }

    #[test]
    fn crash_closes_listener() {
        let (a, b) = pair();
        a.connection(2, 0).unwrap();
        b.crash();
        thread::sleep(Duration::from_millis(100));
        assert!(a.connection(2, 1).is_err());
    }
}
