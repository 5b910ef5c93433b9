use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{select, unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, info, warn};
use serde::Serialize;

use super::reduce::{SlotWorker, TagSlot};
use super::{CommConfig, CommError};
use crate::collective::{OpContext, P2pNode, TrafficSnapshot};
use crate::sharedstate::{simplehash, SharedState};
use crate::types::SyncStrategy;
use crate::wire::{
    read_frame, BandwidthProbeReport, Bye, ByeReason, CommitBody, JoinRequest, JoinRole, Message, PendingPeersAnswer,
    PendingPeersQuery, SharedStateChunk, SharedStateReport, SyncVerdict, TopologyAssign, TopologyOutcome,
    TransitionCommit, Transfer, VoteKind, VoteRequest, WireMessage, PROTOCOL_VERSION,
};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const POLL: Duration = Duration::from_millis(100);
const SYNC_CHUNK: usize = 4 << 20;
const SYNC_WINDOW: usize = 4;
const MIN_PEERS_POLL: Duration = Duration::from_millis(50);

/// Result of one `update_topology` call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TopologyChange {
    pub world: usize,
    pub added: Vec<u64>,
    pub removed: Vec<u64>,
}

impl TopologyChange {
    pub fn is_unchanged(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncOutcome {
    pub in_sync: bool,
    /// Keys this peer received.
    pub received: Vec<String>,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
}

pub(super) struct Inner {
    pub(super) node: Arc<P2pNode>,
    master: Mutex<TcpStream>,
    pub(super) peer_id: u64,
    pub(super) epoch: u64,
    ring: RwLock<Vec<u64>>,
    accepted: AtomicBool,
    master_lost: AtomicBool,
    pub(super) tags: Mutex<HashMap<u64, Arc<TagSlot>>>,
    control: Receiver<Message>,
    pending: Receiver<PendingPeersAnswer>,
    next_query: AtomicU64,
    pub(super) in_flight: AtomicUsize,
    pub(super) slots: Vec<Mutex<OpContext>>,
}

impl Inner {
    pub(super) fn send(&self, msg: impl Into<Message>) -> Result<(), CommError> {
        if self.master_lost.load(Ordering::SeqCst) {
            return Err(CommError::MasterLost);
        }
        let bytes = msg.into().to_frame_bytes();
        self.master.lock().unwrap().write_all(&bytes).map_err(|_| CommError::MasterLost)
    }

    /// Waits for the next item on `rx`, failing once the master is gone.
    pub(super) fn recv<M>(&self, rx: &Receiver<M>) -> Result<M, CommError> {
        loop {
            match rx.recv_timeout(POLL) {
                Ok(m) => return Ok(m),
                Err(RecvTimeoutError::Timeout) => {
                    if self.master_lost.load(Ordering::SeqCst) {
                        return rx.try_recv().map_err(|_| CommError::MasterLost);
                    }
                }
                Err(RecvTimeoutError::Disconnected) => return Err(CommError::MasterLost),
            }
        }
    }

    pub(super) fn is_accepted(&self) -> bool {
        self.accepted.load(Ordering::SeqCst)
    }

    pub(super) fn master_lost(&self) -> bool {
        self.master_lost.load(Ordering::SeqCst)
    }

    /// Installs a committed ring and drops connections to peers outside it.
    pub(super) fn set_ring(&self, ring: &[u64]) {
        let mut cur = self.ring.write().unwrap();
        for p in cur.iter().filter(|p| !ring.contains(p)) {
            if *p != self.peer_id {
                self.node.remove_peer(*p);
            }
        }
        cur.clear();
        cur.extend_from_slice(ring);
    }

    fn mark_master_lost(&self) {
        self.master_lost.store(true, Ordering::SeqCst);
        for t in self.tags.lock().unwrap().values() {
            t.abort.store(true, Ordering::SeqCst);
        }
    }
}

/// A peer's handle on the group.
pub struct Communicator {
    pub(super) inner: Arc<Inner>,
    pub(super) workers: Vec<SlotWorker>,
    master_sock: TcpStream,
    reader: Option<JoinHandle<()>>,
    min_peers: AtomicUsize,
}

impl std::fmt::Debug for Communicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Communicator")
            .field("peer_id", &self.inner.peer_id)
            .field("epoch", &self.inner.epoch)
            .finish()
    }
}

impl Communicator {
    /// Registers with the master. The peer is not part of the group until
    /// its first successful `update_topology`.
    pub fn connect(cfg: CommConfig) -> Result<Self, CommError> {
        let connect_err = |source| CommError::Connect {
            addr: cfg.master_addr.clone(),
            source,
        };
        let addr = cfg
            .master_addr
            .to_socket_addrs()
            .map_err(connect_err)?
            .next()
            .ok_or_else(|| connect_err(std::io::Error::new(std::io::ErrorKind::NotFound, "no address")))?;
        let mut stream = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).map_err(connect_err)?;
        stream.set_nodelay(true)?;
        let node = Arc::new(P2pNode::bind(cfg.p2p.clone())?);
        let hello = JoinRequest {
            version: PROTOCOL_VERSION,
            role: JoinRole::Client {
                p2p_port: node.local_addr().port(),
                known_epoch: cfg.known_epoch,
            },
        };
        stream.write_all(&hello.to_frame_bytes())?;
        stream.set_read_timeout(Some(CONNECT_TIMEOUT))?;
        let reply = read_frame(&mut stream).and_then(|f| Message::from_frame(&f))?;
        stream.set_read_timeout(None)?;
        let assign = match reply {
            Message::JoinAssign(a) => a,
            Message::Bye(b) => {
                return Err(CommError::Refused {
                    reason: b.reason,
                    message: b.message,
                })
            }
            other => return Err(CommError::Protocol(format!("{:?} during handshake", other.msg_type()))),
        };
        node.set_identity(assign.peer_id, assign.epoch);
        info!("registered as peer {} in epoch {}", assign.peer_id, assign.epoch);

        let master_sock = stream.try_clone()?;
        {
            // a crashing node takes its master connection down with it
            let s = stream.try_clone()?;
            node.set_crash_hook(move || {
                let _ = s.shutdown(Shutdown::Both);
            });
        }
        let (control_tx, control_rx) = unbounded();
        let (pending_tx, pending_rx) = unbounded();
        let pool = cfg.pool_size.max(1) as usize;
        let inner = Arc::new(Inner {
            node,
            master: Mutex::new(stream.try_clone()?),
            peer_id: assign.peer_id,
            epoch: assign.epoch,
            ring: RwLock::new(Vec::new()),
            accepted: AtomicBool::new(false),
            master_lost: AtomicBool::new(false),
            tags: Mutex::new(HashMap::new()),
            control: control_rx,
            pending: pending_rx,
            next_query: AtomicU64::new(1),
            in_flight: AtomicUsize::new(0),
            slots: (0..pool).map(|_| Mutex::new(OpContext::new())).collect(),
        });
        let reader = {
            let inner = Arc::clone(&inner);
            thread::Builder::new()
                .name(format!("master-rx-{}", assign.peer_id))
                .spawn(move || reader_loop(inner, stream, control_tx, pending_tx))?
        };
        let workers = (0..pool)
            .map(|s| SlotWorker::spawn(assign.peer_id, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            inner,
            workers,
            master_sock,
            reader: Some(reader),
            min_peers: AtomicUsize::new(cfg.min_peers.max(1)),
        })
    }

    pub fn peer_id(&self) -> u64 {
        self.inner.peer_id
    }

    pub fn epoch(&self) -> u64 {
        self.inner.epoch
    }

    /// Accepted peers in the last committed view, including this one.
    pub fn world_size(&self) -> usize {
        self.inner.ring.read().unwrap().len()
    }

    pub fn ring(&self) -> Vec<u64> {
        self.inner.ring.read().unwrap().clone()
    }

    pub fn is_accepted(&self) -> bool {
        self.inner.is_accepted()
    }

    pub fn node(&self) -> &Arc<P2pNode> {
        &self.inner.node
    }

    pub fn traffic(&self) -> TrafficSnapshot {
        self.inner.node.stats().snapshot()
    }

    /// Group size `update_topology` waits for from now on.
    pub fn set_min_peers(&self, n: usize) {
        self.min_peers.store(n.max(1), Ordering::SeqCst);
    }

    pub fn pool_size(&self) -> usize {
        self.inner.slots.len()
    }

    /// Number of async all-reduces enqueued and not yet finished.
    pub fn pending_handles(&self) -> usize {
        self.inner.in_flight.load(Ordering::SeqCst)
    }

    fn check_no_handles(&self, what: &str) -> Result<(), CommError> {
        match self.pending_handles() {
            0 => Ok(()),
            n => Err(CommError::Usage(format!("{what} while {n} all-reduce handles are pending"))),
        }
    }

    /// Votes to admit pending peers and installs the resulting ring. Blocks
    /// until the group has at least `min_peers` members.
    pub fn update_topology(&self) -> Result<TopologyChange, CommError> {
        self.check_no_handles("update_topology")?;
        let mut total = TopologyChange::default();
        loop {
            let change = self.topology_round()?;
            total.world = change.world;
            total.added.extend(change.added);
            total.removed.extend(change.removed);
            if total.world >= self.min_peers.load(Ordering::SeqCst) {
                return Ok(total);
            }
            thread::sleep(MIN_PEERS_POLL);
        }
    }

    fn topology_round(&self) -> Result<TopologyChange, CommError> {
        let inner = &self.inner;
        'retry: loop {
            inner.send(VoteRequest {
                kind: VoteKind::UpdateTopology,
            })?;
            loop {
                match inner.recv(&inner.control)? {
                    Message::TopologyAssign(a) => self.run_probes(a)?,
                    Message::TransitionCommit(TransitionCommit {
                        body:
                            CommitBody::Topology {
                                outcome,
                                ring,
                                added,
                                removed,
                            },
                        tid,
                    }) => match outcome {
                        TopologyOutcome::Committed => {
                            inner.set_ring(&ring);
                            inner.accepted.store(true, Ordering::SeqCst);
                            debug!("topology {tid} committed: ring {ring:?}");
                            return Ok(TopologyChange {
                                world: ring.len(),
                                added,
                                removed,
                            });
                        }
                        TopologyOutcome::Aborted => {
                            debug!("topology {tid} aborted, peers {removed:?} lost; retrying");
                            if inner.is_accepted() {
                                inner.set_ring(&ring);
                            }
                            continue 'retry;
                        }
                        TopologyOutcome::Rejected => return Err(CommError::NotAdmitted),
                    },
                    Message::TransitionCommit(TransitionCommit {
                        body: CommitBody::Rejected { reason },
                        ..
                    }) => return Err(CommError::Rejected(reason)),
                    other => debug!("ignoring {:?} during topology update", other.msg_type()),
                }
            }
        }
    }

    fn run_probes(&self, a: TopologyAssign) -> Result<(), CommError> {
        let node = &self.inner.node;
        for m in &a.members {
            if m.peer_id != self.inner.peer_id {
                node.set_endpoint(m.peer_id, m.addr());
            }
        }
        let mut measurements = Vec::new();
        let mut failed = Vec::new();
        for &t in &a.probe_targets {
            match node.probe(t, a.probe_bytes) {
                Ok(bps) => measurements.push((t, bps)),
                Err(e) => {
                    warn!("probe to peer {t} failed: {e}");
                    failed.push(t);
                }
            }
        }
        self.inner.send(BandwidthProbeReport {
            tid: a.tid,
            measurements,
            failed,
        })
    }

    /// Asks whether registered peers are waiting to join. Every accepted
    /// peer gets the same answer for the same round.
    pub fn are_peers_pending(&self) -> Result<bool, CommError> {
        let inner = &self.inner;
        let query_id = inner.next_query.fetch_add(1, Ordering::SeqCst);
        inner.send(PendingPeersQuery { query_id })?;
        loop {
            let a = inner.recv(&inner.pending)?;
            if a.query_id == query_id {
                return Ok(a.pending);
            }
        }
    }

    /// Makes every entry of `state` identical across the group.
    pub fn sync_shared_state(&self, state: &mut SharedState<'_>, strategy: SyncStrategy) -> Result<SyncOutcome, CommError> {
        self.check_no_handles("sync_shared_state")?;
        let inner = &self.inner;
        if !inner.is_accepted() {
            return Err(CommError::Usage("sync_shared_state before joining the group".into()));
        }
        while inner.node.sync_inbox().try_recv().is_ok() {}
        inner.send(SharedStateReport {
            strategy,
            entries: state.reports(),
        })?;
        let plan = loop {
            match inner.recv(&inner.control)? {
                Message::SharedStatePlan(p) => break p,
                Message::TransitionCommit(TransitionCommit {
                    body: CommitBody::Sync { verdict, detail },
                    ..
                }) => {
                    return match verdict {
                        SyncVerdict::Failed => Err(CommError::SyncFailed(detail)),
                        _ => Ok(SyncOutcome {
                            in_sync: true,
                            received: Vec::new(),
                            tx_bytes: 0,
                            rx_bytes: 0,
                        }),
                    }
                }
                Message::TransitionCommit(TransitionCommit {
                    body: CommitBody::Rejected { reason },
                    ..
                }) => return Err(CommError::Rejected(reason)),
                other => debug!("ignoring {:?} while waiting for a sync plan", other.msg_type()),
            }
        };

        let me = inner.peer_id;
        let (tx_bytes, send_ok) = self.send_transfers(state, plan.tid, &plan.transfers)?;
        let incoming: Vec<&Transfer> = plan.transfers.iter().filter(|t| t.receivers.contains(&me)).collect();
        let (rx_bytes, recv_ok) = match self.receive_transfers(state, plan.tid, &incoming)? {
            Some(r) => r,
            None => return Err(CommError::SyncFailed("aborted by master".into())),
        };
        let ok = send_ok.and(recv_ok);
        if let Err(e) = &ok {
            warn!("sync {}: {e}", plan.tid);
        }
        inner.send(crate::wire::VoteCast {
            tid: plan.tid,
            yes: ok.is_ok(),
        })?;
        loop {
            match inner.recv(&inner.control)? {
                Message::TransitionCommit(TransitionCommit {
                    body: CommitBody::Sync { verdict, detail },
                    ..
                }) => {
                    return match verdict {
                        SyncVerdict::Failed => Err(CommError::SyncFailed(detail)),
                        _ => Ok(SyncOutcome {
                            in_sync: false,
                            received: incoming.iter().map(|t| t.key.clone()).collect(),
                            tx_bytes,
                            rx_bytes,
                        }),
                    }
                }
                other => debug!("ignoring {:?} while waiting for the sync verdict", other.msg_type()),
            }
        }
    }

    /// Streams every entry this peer donates. Returns bytes sent and whether
    /// all of it reached the socket.
    fn send_transfers(
        &self,
        state: &SharedState<'_>,
        tid: u64,
        transfers: &[Transfer],
    ) -> Result<(u64, Result<(), String>), CommError> {
        let node = &self.inner.node;
        let me = self.inner.peer_id;
        let (done_tx, done_rx) = unbounded();
        let mut outstanding = 0usize;
        let mut sent = 0u64;
        let mut status: Result<(), String> = Ok(());
        for t in transfers.iter().filter(|t| t.donor == me) {
            let Some(entry) = state.get(&t.key) else {
                return Err(CommError::Protocol(format!("plan names unknown key {:?}", t.key)));
            };
            let total = entry.data.len();
            for &r in &t.receivers {
                let conn = match node.connection(r, 0) {
                    Ok(c) => c,
                    Err(e) => {
                        status = Err(format!("connect to {r}: {e}"));
                        continue;
                    }
                };
                let mut off = 0;
                loop {
                    let end = (off + SYNC_CHUNK).min(total);
                    let frame = Message::SharedStateChunk(SharedStateChunk {
                        tid,
                        key: t.key.clone(),
                        total_len: total as u64,
                        offset: off as u64,
                        data: entry.data[off..end].to_vec(),
                    })
                    .to_frame_bytes();
                    if outstanding >= SYNC_WINDOW {
                        if let Ok(Err(e)) = done_rx.recv() {
                            status = Err(e);
                        }
                        outstanding -= 1;
                    }
                    match conn.submit_frame(frame, &done_tx) {
                        Ok(()) => outstanding += 1,
                        Err(e) => status = e,
                    }
                    node.stats().sync_tx.fetch_add((end - off) as u64, Ordering::Relaxed);
                    sent += (end - off) as u64;
                    off = end;
                    if off >= total {
                        break;
                    }
                }
            }
        }
        for _ in 0..outstanding {
            if let Ok(Err(e)) = done_rx.recv() {
                status = Err(e);
            }
        }
        Ok((sent, status))
    }

    /// Collects, verifies and installs incoming entries. `None` when the
    /// master ended the sync while data was still outstanding.
    fn receive_transfers(
        &self,
        state: &mut SharedState<'_>,
        tid: u64,
        incoming: &[&Transfer],
    ) -> Result<Option<(u64, Result<(), String>)>, CommError> {
        let inner = &self.inner;
        let mut staging: HashMap<&str, (Vec<u8>, usize)> = HashMap::new();
        for t in incoming {
            let len = state
                .get(&t.key)
                .ok_or_else(|| CommError::Protocol(format!("plan names unknown key {:?}", t.key)))?
                .data
                .len();
            staging.insert(t.key.as_str(), (vec![0u8; len], 0));
        }
        let mut waiting = incoming.len();
        let mut got = 0u64;
        let mut status: Result<(), String> = Ok(());
        let done = |(buf, n): &(Vec<u8>, usize)| *n >= buf.len();
        waiting -= staging.values().filter(|s| done(s)).count();
        while waiting > 0 {
            select! {
                recv(inner.node.sync_inbox()) -> item => {
                    let Ok((from, chunk)) = item else { return Err(CommError::MasterLost) };
                    if chunk.tid != tid {
                        continue;
                    }
                    let Some(t) = incoming.iter().find(|t| t.key == chunk.key) else { continue };
                    let Some(slot) = staging.get_mut(t.key.as_str()) else { continue };
                    let off = chunk.offset as usize;
                    let end = off + chunk.data.len();
                    if from != t.donor || chunk.total_len as usize != slot.0.len() || end > slot.0.len() {
                        status = Err(format!("malformed chunk for {:?} from {from}", t.key));
                        continue;
                    }
                    if done(slot) {
                        continue;
                    }
                    slot.0[off..end].copy_from_slice(&chunk.data);
                    slot.1 += chunk.data.len();
                    got += chunk.data.len() as u64;
                    if done(slot) {
                        waiting -= 1;
                    }
                },
                recv(inner.control) -> msg => match msg {
                    Ok(Message::TransitionCommit(TransitionCommit { body: CommitBody::Sync { verdict: SyncVerdict::Failed, detail }, .. })) => {
                        return Err(CommError::SyncFailed(detail));
                    }
                    Ok(other) => debug!("ignoring {:?} while receiving shared state", other.msg_type()),
                    Err(_) => return Err(CommError::MasterLost),
                },
                default(POLL) => {
                    if inner.master_lost() {
                        return Err(CommError::MasterLost);
                    }
                }
            }
        }
        for t in incoming {
            let (buf, _) = &staging[t.key.as_str()];
            let h = simplehash(buf);
            if h != t.hash {
                status = Err(format!("entry {:?} hashed to {h:#x}, expected {:#x}", t.key, t.hash));
                continue;
            }
            let e = state.get_mut(&t.key).expect("checked above");
            e.data.copy_from_slice(buf);
            e.revision = t.revision;
        }
        Ok(Some((got, status)))
    }

    /// Abrupt stop, as if the process died: no goodbye to anyone.
    pub fn crash(&self) {
        self.inner.node.crash();
        let _ = self.master_sock.shutdown(Shutdown::Both);
    }

    /// Leaves the group politely.
    pub fn close(mut self) {
        self.stop(true);
    }

    fn stop(&mut self, polite: bool) {
        if polite && !self.inner.master_lost() {
            let _ = self.inner.send(Bye {
                reason: ByeReason::Leaving,
                message: String::new(),
            });
        }
        let _ = self.master_sock.shutdown(Shutdown::Both);
        self.inner.node.shutdown();
        for w in self.workers.drain(..) {
            w.join();
        }
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

impl Drop for Communicator {
    fn drop(&mut self) {
        self.stop(true);
    }
}

fn reader_loop(inner: Arc<Inner>, stream: TcpStream, control: Sender<Message>, pending: Sender<PendingPeersAnswer>) {
    let mut r = BufReader::new(stream);
    loop {
        let msg = match read_frame(&mut r).and_then(|f| Message::from_frame(&f)) {
            Ok(m) => m,
            Err(e) => {
                debug!("master connection ended: {e}");
                break;
            }
        };
        let tag = match &msg {
            Message::TransitionCommit(TransitionCommit {
                body: CommitBody::CollectiveInit { tag, .. } | CommitBody::CollectiveComplete { tag, .. },
                ..
            }) => Some(*tag),
            Message::AbortNotify(a) => Some(a.tag),
            _ => None,
        };
        if let Some(tag) = tag {
            let slot = inner.tags.lock().unwrap().get(&tag).cloned();
            match slot {
                Some(s) => {
                    if matches!(msg, Message::AbortNotify(_)) {
                        s.abort.store(true, Ordering::SeqCst);
                    }
                    let _ = s.tx.send(msg);
                }
                None => debug!("dropping {:?} for idle tag {tag}", msg.msg_type()),
            }
            continue;
        }
        match msg {
            Message::PendingPeersAnswer(a) => {
                let _ = pending.send(a);
            }
            Message::Bye(b) => {
                warn!("master said goodbye ({:?}): {}", b.reason, b.message);
                break;
            }
            m @ (Message::TopologyAssign(_) | Message::SharedStatePlan(_) | Message::TransitionCommit(_)) => {
                let _ = control.send(m);
            }
            other => warn!("unexpected {:?} from master", other.msg_type()),
        }
    }
    inner.mark_master_lost();
}
