//! The master's group state machine. Inputs are connection events and
//! decoded messages; outputs are [`Action`]s for the service to perform.
//! Nothing here touches a socket, so every transition is unit-testable.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};

use super::audit::{AuditEvent, AuditLog, MajorOp};
use super::plan::{digest_after, select_sync_plan, CommittedDigest, PeerReport};
use super::tally::{TallyOutcome, VoteTally};
use super::MasterConfig;
use crate::topology::{solve_quick, CostMatrix, RingTopology, EXACT_MAX_N};
use crate::types::AbortReason;
use crate::wire::{
    AbortNotify, BandwidthProbeReport, Bye, ByeReason, CollectiveCompleteVote, CollectiveInitVote, CommitBody,
    JoinAssign, Message, PeerEndpoint, PendingPeersAnswer, SharedStatePlan, SharedStateReport, SyncVerdict,
    TopologyAssign, TopologyOutcome, Transfer, TransitionCommit, VoteCast,
};

/// Seconds charged for a pair that could not be measured.
const UNREACHABLE_COST: f64 = 1.0e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Registered,
    Accepted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ConnState {
    Idle,
    VoteAcceptNewPeers,
    ConnectingP2P,
    OptimizingTopology,
    SyncSharedState,
    CollectiveCommsRunning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagPhase {
    VoteInitiate,
    Perform,
    VoteComplete,
}

#[derive(Debug, Clone)]
pub struct PeerRecord {
    pub peer_id: u64,
    pub phase: Phase,
    pub endpoint: PeerEndpoint,
    pub last_seen: Instant,
    /// A registered peer that asked to be let in.
    pub ready: bool,
    /// Ring this peer was last told about.
    view: Vec<u64>,
}

#[derive(Debug)]
pub enum Input {
    Joined { peer: u64, host: String, p2p_port: u16 },
    Message { peer: u64, msg: Message },
    Lost { peer: u64, reason: String },
    Tick,
    Moonshot { generation: u64, order: Vec<u64>, cost: f64 },
}

#[derive(Debug)]
pub enum Action {
    Send(u64, Message),
    Disconnect(u64),
    StartMoonshot {
        generation: u64,
        ids: Vec<u64>,
        matrix: CostMatrix,
        cancel: Arc<AtomicBool>,
    },
}

#[derive(Debug)]
struct TopologyRound {
    tid: u64,
    voters: BTreeSet<u64>,
    newcomers: BTreeSet<u64>,
    reports: BTreeMap<u64, BandwidthProbeReport>,
    started: Instant,
}

impl TopologyRound {
    fn participants(&self) -> impl Iterator<Item = u64> + '_ {
        self.voters.iter().chain(self.newcomers.iter()).copied()
    }

    fn complete(&self) -> bool {
        self.participants().all(|p| self.reports.contains_key(&p))
    }
}

#[derive(Debug)]
struct SyncRound {
    tid: u64,
    expected: BTreeSet<u64>,
    reports: BTreeMap<u64, SharedStateReport>,
    plan: Vec<Transfer>,
    tally: Option<VoteTally>,
    started: Instant,
}

#[derive(Debug)]
struct TagState {
    phase: TagPhase,
    seq: u64,
    voters: BTreeSet<u64>,
    init_votes: BTreeMap<u64, CollectiveInitVote>,
    tally: Option<VoteTally>,
    started: Instant,
    first_complete: Option<Instant>,
}

#[derive(Debug, Default)]
struct PendingRound {
    round: u64,
    queried: BTreeMap<u64, u64>,
    started: Option<Instant>,
}

pub struct MasterState {
    cfg: MasterConfig,
    epoch: u64,
    audit: AuditLog,
    peers: BTreeMap<u64, PeerRecord>,
    ring: RingTopology,
    next_tid: u64,
    topo_requests: BTreeMap<u64, Instant>,
    round: Option<TopologyRound>,
    sync: Option<SyncRound>,
    tags: BTreeMap<u64, TagState>,
    tag_seq: BTreeMap<u64, u64>,
    pending: PendingRound,
    /// Seconds to move one probe payload from -> to.
    costs: BTreeMap<(u64, u64), f64>,
    committed: Option<CommittedDigest>,
    moonshot_gen: u64,
    moonshot_cancel: Option<Arc<AtomicBool>>,
    improved_ring: Option<(Vec<u64>, f64)>,
    major: Option<(MajorOp, u64)>,
    last_state: ConnState,
    out: Vec<Action>,
}

fn commit(tid: u64, body: CommitBody) -> Message {
    Message::TransitionCommit(TransitionCommit { tid, body })
}

impl MasterState {
    pub fn new(cfg: MasterConfig, epoch: u64, audit: AuditLog) -> Self {
        Self {
            cfg,
            epoch,
            audit,
            peers: BTreeMap::new(),
            ring: RingTopology::default(),
            next_tid: 1,
            topo_requests: BTreeMap::new(),
            round: None,
            sync: None,
            tags: BTreeMap::new(),
            tag_seq: BTreeMap::new(),
            pending: PendingRound::default(),
            costs: BTreeMap::new(),
            committed: None,
            moonshot_gen: 0,
            moonshot_cancel: None,
            improved_ring: None,
            major: None,
            last_state: ConnState::Idle,
            out: Vec::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn ring(&self) -> &[u64] {
        &self.ring.order
    }

    pub fn peer(&self, id: u64) -> Option<&PeerRecord> {
        self.peers.get(&id)
    }

    pub fn accepted(&self) -> BTreeSet<u64> {
        self.peers
            .values()
            .filter(|p| p.phase == Phase::Accepted)
            .map(|p| p.peer_id)
            .collect()
    }

    pub fn committed_digest(&self) -> Option<&CommittedDigest> {
        self.committed.as_ref()
    }

    pub fn conn_state(&self) -> ConnState {
        if self.round.is_some() {
            ConnState::ConnectingP2P
        } else if self.sync.is_some() {
            ConnState::SyncSharedState
        } else if !self.tags.is_empty() {
            ConnState::CollectiveCommsRunning
        } else if !self.topo_requests.is_empty() {
            ConnState::VoteAcceptNewPeers
        } else {
            ConnState::Idle
        }
    }

    pub fn tag_phase(&self, tag: u64) -> Option<TagPhase> {
        self.tags.get(&tag).map(|t| t.phase)
    }

    pub fn handle(&mut self, input: Input, now: Instant) -> Vec<Action> {
        match input {
            Input::Joined { peer, host, p2p_port } => self.on_join(peer, host, p2p_port, now),
            Input::Message { peer, msg } => self.on_message(peer, msg, now),
            Input::Lost { peer, reason } => self.on_lost(peer, &reason, now),
            Input::Tick => self.on_tick(now),
            Input::Moonshot {
                generation,
                order,
                cost,
            } => self.on_moonshot(generation, order, cost),
        }
        let st = self.conn_state();
        if st != self.last_state {
            self.last_state = st;
            self.audit.record(AuditEvent::State {
                conn_state: format!("{st:?}"),
            });
        }
        std::mem::take(&mut self.out)
    }

    fn send(&mut self, peer: u64, msg: Message) {
        self.out.push(Action::Send(peer, msg));
    }

    fn tid(&mut self) -> u64 {
        let t = self.next_tid;
        self.next_tid += 1;
        t
    }

    fn begin(&mut self, op: MajorOp, tid: u64) {
        if let Some((a, t)) = self.major {
            warn!("major operation {op:?}/{tid} begins while {a:?}/{t} is active");
        }
        self.major = Some((op, tid));
        self.audit.record(AuditEvent::Begin { op, tid });
    }

    fn end(&mut self, op: MajorOp) {
        if let Some((a, tid)) = self.major {
            if a == op {
                self.major = None;
                self.audit.record(AuditEvent::End { op, tid });
            }
        }
    }

    fn reject(&mut self, peer: u64, reason: String) {
        debug!("rejecting request from peer {peer}: {reason}");
        self.audit.record(AuditEvent::Reject {
            peer,
            reason: reason.clone(),
        });
        self.send(peer, commit(0, CommitBody::Rejected { reason }));
    }

    fn on_join(&mut self, peer: u64, host: String, p2p_port: u16, now: Instant) {
        let endpoint = PeerEndpoint {
            peer_id: peer,
            host,
            port: p2p_port,
        };
        self.audit.record(AuditEvent::Join {
            peer,
            endpoint: endpoint.addr(),
        });
        self.peers.insert(
            peer,
            PeerRecord {
                peer_id: peer,
                phase: Phase::Registered,
                endpoint,
                last_seen: now,
                ready: false,
                view: Vec::new(),
            },
        );
        self.send(
            peer,
            Message::JoinAssign(JoinAssign {
                peer_id: peer,
                epoch: self.epoch,
            }),
        );
    }

    fn on_message(&mut self, peer: u64, msg: Message, now: Instant) {
        let Some(rec) = self.peers.get_mut(&peer) else {
            debug!("message from unknown peer {peer} dropped");
            return;
        };
        rec.last_seen = now;
        match msg {
            Message::VoteRequest(_) => self.on_vote_request(peer, now),
            Message::BandwidthProbeReport(r) => self.on_probe_report(peer, r),
            Message::SharedStateReport(r) => self.on_sync_report(peer, r, now),
            Message::VoteCast(v) => self.on_vote_cast(peer, v),
            Message::CollectiveInitVote(v) => self.on_init_vote(peer, v, now),
            Message::CollectiveCompleteVote(v) => self.on_complete_vote(peer, v, now),
            Message::PendingPeersQuery(q) => self.on_pending_query(peer, q.query_id, now),
            Message::Bye(_) => {
                self.out.push(Action::Disconnect(peer));
                self.on_lost(peer, "left", now);
            }
            other => {
                warn!("peer {peer} sent {:?} to the master", other.msg_type());
                self.send(
                    peer,
                    Message::Bye(Bye {
                        reason: ByeReason::Protocol,
                        message: format!("unexpected {:?}", other.msg_type()),
                    }),
                );
                self.out.push(Action::Disconnect(peer));
                self.on_lost(peer, "protocol violation", now);
            }
        }
    }

    fn is_accepted(&self, peer: u64) -> bool {
        self.peers.get(&peer).is_some_and(|p| p.phase == Phase::Accepted)
    }

    // -- topology ----------------------------------------------------------

    fn on_vote_request(&mut self, peer: u64, now: Instant) {
        if !self.is_accepted(peer) {
            self.peers.get_mut(&peer).unwrap().ready = true;
            self.try_start_round(now);
            return;
        }
        if self.sync.is_some() || !self.tags.is_empty() {
            self.reject(peer, "topology update while another major operation is running".into());
            return;
        }
        if self.round.as_ref().is_some_and(|r| r.voters.contains(&peer)) || self.topo_requests.contains_key(&peer) {
            self.reject(peer, "duplicate topology request".into());
            return;
        }
        if self.topo_requests.is_empty() && self.round.is_none() {
            let tid = self.next_tid;
            self.begin(MajorOp::AcceptPeers, tid);
        }
        self.topo_requests.insert(peer, now);
        self.try_start_round(now);
    }

    fn try_start_round(&mut self, now: Instant) {
        if self.round.is_some() || self.sync.is_some() || !self.tags.is_empty() {
            return;
        }
        let accepted = self.accepted();
        if !accepted.iter().all(|p| self.topo_requests.contains_key(p)) {
            return;
        }
        let newcomers: BTreeSet<u64> = self
            .peers
            .values()
            .filter(|p| p.phase == Phase::Registered && p.ready)
            .map(|p| p.peer_id)
            .collect();
        if accepted.is_empty() && newcomers.is_empty() {
            return;
        }
        if accepted.is_empty() {
            let tid = self.next_tid;
            self.begin(MajorOp::AcceptPeers, tid);
        }
        let tid = self.tid();
        if newcomers.is_empty() {
            let (order, cost) = match self.improved_ring.take() {
                Some(better) => better,
                None => (self.ring.order.clone(), self.ring.cost),
            };
            self.commit_topology(tid, order, cost, &accepted, &BTreeSet::new());
            return;
        }

        self.cancel_moonshot();
        let members: Vec<PeerEndpoint> = accepted
            .iter()
            .chain(newcomers.iter())
            .map(|p| self.peers[p].endpoint.clone())
            .collect();
        let newcomer_list: Vec<u64> = newcomers.iter().copied().collect();
        for &p in accepted.iter().chain(newcomers.iter()) {
            // only pairs involving a newcomer are new; the rest is cached
            let probe_targets: Vec<u64> = if accepted.contains(&p) {
                newcomer_list.clone()
            } else {
                accepted.iter().chain(newcomers.iter()).copied().filter(|&q| q != p).collect()
            };
            self.send(
                p,
                Message::TopologyAssign(TopologyAssign {
                    tid,
                    members: members.clone(),
                    newcomers: newcomer_list.clone(),
                    probe_targets,
                    probe_bytes: self.cfg.probe_bytes,
                }),
            );
        }
        info!("topology round {tid}: {} accepted, newcomers {newcomer_list:?}", accepted.len());
        self.round = Some(TopologyRound {
            tid,
            voters: accepted,
            newcomers,
            reports: BTreeMap::new(),
            started: now,
        });
    }

    fn on_probe_report(&mut self, peer: u64, rep: BandwidthProbeReport) {
        let valid = self
            .round
            .as_ref()
            .is_some_and(|r| r.tid == rep.tid && (r.voters.contains(&peer) || r.newcomers.contains(&peer)));
        if !valid {
            debug!("stale probe report from {peer} for tid {}", rep.tid);
            return;
        }
        let bytes = self.cfg.probe_bytes as f64;
        for &(to, bps) in &rep.measurements {
            if bps.is_finite() && bps > 0.0 {
                self.costs.insert((peer, to), bytes / bps);
            }
        }
        let round = self.round.as_mut().unwrap();
        round.reports.insert(peer, rep);
        if round.complete() {
            self.finish_round();
        }
    }

    fn finish_round(&mut self) {
        let round = self.round.take().expect("round in progress");
        let mut rejected = BTreeSet::new();
        for (&reporter, rep) in &round.reports {
            for &f in &rep.failed {
                if round.newcomers.contains(&f) {
                    rejected.insert(f);
                }
                if round.newcomers.contains(&reporter) {
                    rejected.insert(reporter);
                }
            }
        }
        let admitted: BTreeSet<u64> = round.newcomers.difference(&rejected).copied().collect();
        for &r in &rejected {
            if let Some(p) = self.peers.get_mut(&r) {
                p.ready = false;
            }
            self.send(
                r,
                commit(
                    round.tid,
                    CommitBody::Topology {
                        outcome: TopologyOutcome::Rejected,
                        ring: Vec::new(),
                        added: Vec::new(),
                        removed: Vec::new(),
                    },
                ),
            );
        }
        let members: Vec<u64> = round.voters.iter().chain(admitted.iter()).copied().collect();
        let (order, cost) = self.solve(&members);
        self.commit_topology(round.tid, order, cost, &round.voters, &admitted);
    }

    /// Cost matrix over the accepted peers in ring order.
    pub fn cost_matrix(&self) -> (Vec<u64>, CostMatrix) {
        let ids = self.ring().to_vec();
        let m = self.matrix(&ids);
        (ids, m)
    }

    fn matrix(&self, ids: &[u64]) -> CostMatrix {
        let n = ids.len();
        let mut m = CostMatrix::new(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let c = self.costs.get(&(ids[i], ids[j])).copied().unwrap_or(UNREACHABLE_COST);
                    m.set(i, j, c.max(1e-12));
                }
            }
        }
        m
    }

    fn ring_cost(&self, order: &[u64]) -> f64 {
        let n = order.len();
        if n < 2 {
            return 0.0;
        }
        (0..n)
            .map(|k| {
                self.costs
                    .get(&(order[k], order[(k + 1) % n]))
                    .copied()
                    .unwrap_or(UNREACHABLE_COST)
            })
            .sum()
    }

    fn solve(&mut self, members: &[u64]) -> (Vec<u64>, f64) {
        let mut ids = members.to_vec();
        ids.sort_unstable();
        if ids.len() <= 2 {
            let cost = self.ring_cost(&ids);
            return (ids, cost);
        }
        let m = self.matrix(&ids);
        let tour = solve_quick(&m, self.cfg.quick_time_limit).expect("complete matrix with n >= 3");
        let ring = RingTopology::from_tour(&ids, &tour);
        if self.cfg.moonshot && ids.len() >= 4 && ids.len() <= EXACT_MAX_N {
            self.moonshot_gen += 1;
            let cancel = Arc::new(AtomicBool::new(false));
            self.moonshot_cancel = Some(Arc::clone(&cancel));
            self.out.push(Action::StartMoonshot {
                generation: self.moonshot_gen,
                ids,
                matrix: m,
                cancel,
            });
        }
        (ring.order, ring.cost)
    }

    fn cancel_moonshot(&mut self) {
        self.moonshot_gen += 1;
        if let Some(c) = self.moonshot_cancel.take() {
            c.store(true, Ordering::SeqCst);
        }
        self.improved_ring = None;
    }

    fn on_moonshot(&mut self, generation: u64, order: Vec<u64>, cost: f64) {
        if generation != self.moonshot_gen {
            return;
        }
        let mut a = order.clone();
        let mut b = self.ring.order.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return;
        }
        let current = self.ring_cost(&self.ring.order);
        if cost < current * (1.0 - 1e-9) {
            info!("exact solve improved ring cost {current:.6} -> {cost:.6}; applying at next topology update");
            self.improved_ring = Some((order, cost));
        }
    }

    fn commit_topology(
        &mut self,
        tid: u64,
        order: Vec<u64>,
        cost: f64,
        voters: &BTreeSet<u64>,
        admitted: &BTreeSet<u64>,
    ) {
        for &a in admitted {
            if let Some(p) = self.peers.get_mut(&a) {
                p.phase = Phase::Accepted;
                p.ready = false;
            }
        }
        self.ring = RingTopology {
            order: order.clone(),
            cost,
        };
        let ids: Vec<u64> = order.clone();
        for &p in &ids {
            let view = std::mem::take(&mut self.peers.get_mut(&p).unwrap().view);
            // equal to `ids - view` for veterans; a newcomer learns who
            // else was admitted with it, so it can tell whether anyone
            // in the ring predates this round
            let added: Vec<u64> = admitted.iter().copied().filter(|x| *x != p).collect();
            let removed: Vec<u64> = view.iter().copied().filter(|x| !ids.contains(x)).collect();
            self.peers.get_mut(&p).unwrap().view = ids.clone();
            self.send(
                p,
                commit(
                    tid,
                    CommitBody::Topology {
                        outcome: TopologyOutcome::Committed,
                        ring: ids.clone(),
                        added,
                        removed,
                    },
                ),
            );
        }
        self.topo_requests.clear();
        self.audit.record(AuditEvent::Commit {
            tid,
            kind: "topology".into(),
            voters: voters.len(),
            yes: voters.len(),
            detail: format!("admitted {:?}", admitted),
        });
        self.audit.record(AuditEvent::Ring { order: ids, cost });
        self.end(MajorOp::AcceptPeers);
    }

    fn abort_round(&mut self, lost: u64) {
        let Some(round) = self.round.take() else { return };
        let remaining: Vec<u64> = self.ring.order.clone();
        for p in round.participants().filter(|&p| p != lost).collect::<Vec<_>>() {
            if let Some(rec) = self.peers.get_mut(&p) {
                rec.ready = false;
            }
            self.send(
                p,
                commit(
                    round.tid,
                    CommitBody::Topology {
                        outcome: TopologyOutcome::Aborted,
                        ring: remaining.clone(),
                        added: Vec::new(),
                        removed: vec![lost],
                    },
                ),
            );
        }
        self.topo_requests.clear();
        self.audit.record(AuditEvent::Abort {
            tid: round.tid,
            kind: "topology".into(),
            reason: format!("peer {lost} lost"),
        });
        self.end(MajorOp::AcceptPeers);
    }

    // -- pending peers -----------------------------------------------------

    fn on_pending_query(&mut self, peer: u64, query_id: u64, now: Instant) {
        if !self.is_accepted(peer) {
            let pending = self.any_ready_newcomer();
            self.send(
                peer,
                Message::PendingPeersAnswer(PendingPeersAnswer {
                    query_id,
                    round: self.pending.round,
                    pending,
                }),
            );
            return;
        }
        if self.pending.queried.is_empty() {
            self.pending.started = Some(now);
        }
        self.pending.queried.insert(peer, query_id);
        self.check_pending();
    }

    fn any_ready_newcomer(&self) -> bool {
        self.peers.values().any(|p| p.phase == Phase::Registered && p.ready)
    }

    fn check_pending(&mut self) {
        if self.pending.queried.is_empty() {
            return;
        }
        let accepted = self.accepted();
        if !accepted.iter().all(|p| self.pending.queried.contains_key(p)) {
            return;
        }
        let pending = self.any_ready_newcomer();
        let round = self.pending.round;
        let queried = std::mem::take(&mut self.pending.queried);
        for (&p, &query_id) in &queried {
            self.send(
                p,
                Message::PendingPeersAnswer(PendingPeersAnswer {
                    query_id,
                    round,
                    pending,
                }),
            );
        }
        self.audit.record(AuditEvent::PendingAnswer {
            round,
            pending,
            peers: queried.len(),
        });
        self.pending.round += 1;
        self.pending.started = None;
    }

    // -- shared state ------------------------------------------------------

    fn on_sync_report(&mut self, peer: u64, rep: SharedStateReport, now: Instant) {
        if !self.is_accepted(peer) {
            self.reject(peer, "only accepted peers may sync shared state".into());
            return;
        }
        if self.round.is_some() || !self.topo_requests.is_empty() || !self.tags.is_empty() {
            self.reject(peer, "shared-state sync while another major operation is running".into());
            return;
        }
        if self.sync.is_none() {
            let tid = self.tid();
            self.begin(MajorOp::SyncSharedState, tid);
            self.sync = Some(SyncRound {
                tid,
                expected: self.accepted(),
                reports: BTreeMap::new(),
                plan: Vec::new(),
                tally: None,
                started: now,
            });
        }
        let sync = self.sync.as_mut().unwrap();
        if sync.tally.is_some() || sync.reports.contains_key(&peer) || !sync.expected.contains(&peer) {
            self.reject(peer, "unexpected shared-state report".into());
            return;
        }
        sync.reports.insert(peer, rep);
        if sync.reports.len() == sync.expected.len() {
            self.plan_sync();
        }
    }

    fn plan_sync(&mut self) {
        let sync = self.sync.as_mut().unwrap();
        let reports: Vec<PeerReport> = sync
            .reports
            .iter()
            .map(|(&peer, r)| PeerReport {
                peer,
                strategy: r.strategy,
                entries: r.entries.clone(),
            })
            .collect();
        let tid = sync.tid;
        let expected: Vec<u64> = sync.expected.iter().copied().collect();
        match select_sync_plan(&reports, self.committed.as_ref()) {
            Err(e) => {
                let detail = e.to_string();
                warn!("sync {tid} failed: {detail}");
                self.finish_sync(SyncVerdict::Failed, detail);
            }
            Ok(plan) if plan.is_empty() => {
                self.committed = Some(digest_after(&reports, &plan));
                self.finish_sync(SyncVerdict::InSync, String::new());
            }
            Ok(plan) => {
                for &p in &expected {
                    self.send(
                        p,
                        Message::SharedStatePlan(SharedStatePlan {
                            tid,
                            transfers: plan.clone(),
                        }),
                    );
                }
                let sync = self.sync.as_mut().unwrap();
                sync.plan = plan;
                sync.tally = Some(VoteTally::new(tid, expected));
            }
        }
    }

    fn on_vote_cast(&mut self, peer: u64, v: VoteCast) {
        let Some(sync) = self.sync.as_mut() else {
            debug!("vote from {peer} for tid {} with no sync running", v.tid);
            return;
        };
        let Some(tally) = sync.tally.as_mut().filter(|t| t.tid == v.tid) else {
            debug!("stale vote from {peer} for tid {}", v.tid);
            return;
        };
        match tally.cast(peer, v.yes) {
            Err(e) => warn!("sync vote: {e}"),
            Ok(TallyOutcome::Pending) => {}
            Ok(TallyOutcome::Commit) => {
                let reports: Vec<PeerReport> = sync
                    .reports
                    .iter()
                    .map(|(&peer, r)| PeerReport {
                        peer,
                        strategy: r.strategy,
                        entries: r.entries.clone(),
                    })
                    .collect();
                let keys: Vec<&str> = sync.plan.iter().map(|t| t.key.as_str()).collect();
                let detail = keys.join(",");
                self.committed = Some(digest_after(&reports, &sync.plan));
                self.finish_sync(SyncVerdict::Updated, detail);
            }
            Ok(TallyOutcome::Abort) => {
                self.finish_sync(SyncVerdict::Failed, format!("peer {peer} could not apply the plan"));
            }
        }
    }

    fn finish_sync(&mut self, verdict: SyncVerdict, detail: String) {
        let Some(sync) = self.sync.take() else { return };
        // peers that have not reported yet are not waiting for a verdict
        let recipients: Vec<u64> = match sync.tally {
            Some(_) => sync.expected.iter().copied().collect(),
            None => sync.reports.keys().copied().collect(),
        };
        for &p in &recipients {
            if self.peers.contains_key(&p) {
                self.send(
                    p,
                    commit(
                        sync.tid,
                        CommitBody::Sync {
                            verdict,
                            detail: detail.clone(),
                        },
                    ),
                );
            }
        }
        let voters = sync.expected.len();
        if verdict == SyncVerdict::Failed {
            self.audit.record(AuditEvent::Abort {
                tid: sync.tid,
                kind: "sync".into(),
                reason: detail,
            });
        } else {
            let yes = sync.tally.as_ref().map_or(voters, |t| t.yes_count());
            self.audit.record(AuditEvent::Commit {
                tid: sync.tid,
                kind: format!("sync_{verdict:?}").to_lowercase(),
                voters,
                yes,
                detail,
            });
        }
        self.end(MajorOp::SyncSharedState);
    }

    // -- collectives -------------------------------------------------------

    fn abort_to(&mut self, peer: u64, tag: u64, seq: u64, reason: AbortReason) {
        let remaining: Vec<u64> = self.ring.order.clone();
        self.send(
            peer,
            Message::AbortNotify(AbortNotify {
                tag,
                seq,
                reason,
                remaining,
            }),
        );
    }

    fn on_init_vote(&mut self, peer: u64, v: CollectiveInitVote, now: Instant) {
        let tag = v.tag;
        if !self.is_accepted(peer) {
            self.abort_to(peer, tag, 0, AbortReason::Rejected);
            return;
        }
        if self.round.is_some() || self.sync.is_some() || !self.topo_requests.is_empty() {
            self.abort_to(peer, tag, 0, AbortReason::Rejected);
            return;
        }
        if !self.tags.contains_key(&tag) {
            if self.tags.is_empty() {
                let tid = self.next_tid;
                self.begin(MajorOp::Collectives, tid);
            }
            self.tags.insert(
                tag,
                TagState {
                    phase: TagPhase::VoteInitiate,
                    seq: 0,
                    voters: self.accepted(),
                    init_votes: BTreeMap::new(),
                    tally: None,
                    started: now,
                    first_complete: None,
                },
            );
        }
        let st = self.tags.get_mut(&tag).unwrap();
        if st.phase != TagPhase::VoteInitiate || st.init_votes.contains_key(&peer) || !st.voters.contains(&peer) {
            self.abort_to(peer, tag, 0, AbortReason::Rejected);
            return;
        }
        st.init_votes.insert(peer, v);
        if st.init_votes.len() < st.voters.len() {
            return;
        }
        let first = st.init_votes.values().next().unwrap().clone();
        let mismatch = st.init_votes.values().any(|x| *x != first);
        let voters: Vec<u64> = st.voters.iter().copied().collect();
        if mismatch {
            self.tags.remove(&tag);
            for &p in &voters {
                self.abort_to(p, tag, 0, AbortReason::Mismatch);
            }
            self.audit.record(AuditEvent::Abort {
                tid: 0,
                kind: format!("collective_init tag {tag}"),
                reason: "parameters differ across peers".into(),
            });
            self.maybe_end_collectives();
            return;
        }
        let seq = {
            let s = self.tag_seq.entry(tag).or_insert(0);
            *s += 1;
            *s
        };
        let tid = self.tid();
        let ring: Vec<u64> = self.ring.order.iter().copied().filter(|p| voters.contains(p)).collect();
        let st = self.tags.get_mut(&tag).unwrap();
        st.phase = TagPhase::Perform;
        st.seq = seq;
        st.started = now;
        st.tally = Some(VoteTally::new(tid, voters.iter().copied()));
        for &p in &voters {
            self.send(p, commit(tid, CommitBody::CollectiveInit { tag, seq, ring: ring.clone() }));
        }
        self.audit.record(AuditEvent::Commit {
            tid,
            kind: "collective_init".into(),
            voters: voters.len(),
            yes: voters.len(),
            detail: format!("tag {tag} seq {seq} bytes {}", first.byte_len),
        });
    }

    fn on_complete_vote(&mut self, peer: u64, v: CollectiveCompleteVote, now: Instant) {
        let Some(st) = self.tags.get_mut(&v.tag) else {
            debug!("complete vote from {peer} for idle tag {}", v.tag);
            return;
        };
        if st.phase == TagPhase::VoteInitiate || st.seq != v.seq {
            debug!("stale complete vote from {peer} for tag {} seq {}", v.tag, v.seq);
            return;
        }
        st.phase = TagPhase::VoteComplete;
        st.first_complete.get_or_insert(now);
        let tally = st.tally.as_mut().unwrap();
        let tid = tally.tid;
        match tally.cast(peer, v.ok) {
            Err(e) => warn!("complete vote for tag {}: {e}", v.tag),
            Ok(TallyOutcome::Pending) => {}
            Ok(TallyOutcome::Commit) => {
                let st = self.tags.remove(&v.tag).unwrap();
                for &p in &st.voters {
                    self.send(
                        p,
                        commit(
                            tid,
                            CommitBody::CollectiveComplete {
                                tag: v.tag,
                                seq: v.seq,
                            },
                        ),
                    );
                }
                self.audit.record(AuditEvent::Commit {
                    tid,
                    kind: "collective_complete".into(),
                    voters: st.voters.len(),
                    yes: st.tally.as_ref().unwrap().yes_count(),
                    detail: format!("tag {} seq {}", v.tag, v.seq),
                });
                self.maybe_end_collectives();
            }
            Ok(TallyOutcome::Abort) => self.abort_tag(v.tag, AbortReason::LocalFailure, None),
        }
    }

    fn abort_tag(&mut self, tag: u64, reason: AbortReason, lost: Option<u64>) {
        let Some(st) = self.tags.remove(&tag) else { return };
        // before the init commit only peers that already voted are waiting
        let recipients: Vec<u64> = if st.phase == TagPhase::VoteInitiate {
            st.init_votes.keys().copied().collect()
        } else {
            st.voters.iter().copied().collect()
        };
        for &p in recipients.iter().filter(|&&p| Some(p) != lost) {
            if self.peers.contains_key(&p) {
                self.abort_to(p, tag, st.seq, reason);
            }
        }
        self.audit.record(AuditEvent::Abort {
            tid: st.tally.as_ref().map_or(0, |t| t.tid),
            kind: format!("collective tag {tag} seq {}", st.seq),
            reason: reason.to_string(),
        });
        self.maybe_end_collectives();
    }

    fn maybe_end_collectives(&mut self) {
        if self.tags.is_empty() {
            self.end(MajorOp::Collectives);
        }
    }

    // -- failures ----------------------------------------------------------

    fn on_lost(&mut self, peer: u64, reason: &str, now: Instant) {
        let Some(rec) = self.peers.remove(&peer) else { return };
        info!("peer {peer} lost: {reason}");
        self.audit.record(AuditEvent::Leave {
            peer,
            reason: reason.to_string(),
        });
        if rec.phase == Phase::Registered {
            if let Some(round) = self.round.as_mut() {
                if round.newcomers.remove(&peer) {
                    round.reports.remove(&peer);
                    if round.complete() {
                        self.finish_round();
                    }
                }
            }
            return;
        }

        self.ring = self.ring.without(peer);
        self.ring.cost = self.ring_cost(&self.ring.order);
        self.cancel_moonshot();
        self.topo_requests.remove(&peer);
        if self.round.as_ref().is_some_and(|r| r.voters.contains(&peer)) {
            self.abort_round(peer);
        }
        if self.sync.as_ref().is_some_and(|s| s.expected.contains(&peer)) {
            self.finish_sync(SyncVerdict::Failed, format!("peer {peer} lost"));
        }
        let affected: Vec<u64> = self
            .tags
            .iter()
            .filter(|(_, s)| s.voters.contains(&peer))
            .map(|(&t, _)| t)
            .collect();
        for tag in affected {
            self.abort_tag(tag, AbortReason::PeerLost, Some(peer));
        }
        self.pending.queried.remove(&peer);
        self.check_pending();
        if self.topo_requests.is_empty() && self.round.is_none() {
            self.end(MajorOp::AcceptPeers);
        } else {
            self.try_start_round(now);
        }
    }

    fn kick(&mut self, peers: Vec<u64>, what: &str, now: Instant) {
        for p in peers {
            warn!("peer {p} timed out during {what}");
            self.out.push(Action::Disconnect(p));
            self.on_lost(p, &format!("timed out during {what}"), now);
        }
    }

    fn on_tick(&mut self, now: Instant) {
        let limit = self.cfg.vote_timeout;
        let expired = |t: Instant| now.duration_since(t) > limit;

        if let Some(&oldest) = self.topo_requests.values().min() {
            if expired(oldest) && self.round.is_none() {
                let late: Vec<u64> = self
                    .accepted()
                    .into_iter()
                    .filter(|p| !self.topo_requests.contains_key(p))
                    .collect();
                self.kick(late, "topology vote", now);
            }
        }
        if let Some(r) = &self.round {
            if expired(r.started) {
                let late: Vec<u64> = r.participants().filter(|p| !r.reports.contains_key(p)).collect();
                self.kick(late, "p2p connection setup", now);
            }
        }
        if let Some(s) = &self.sync {
            if expired(s.started) {
                let late: Vec<u64> = match &s.tally {
                    None => s.expected.iter().copied().filter(|p| !s.reports.contains_key(p)).collect(),
                    Some(t) => t.missing().collect(),
                };
                self.kick(late, "shared-state sync", now);
            }
        }
        let mut late = BTreeSet::new();
        for st in self.tags.values() {
            match st.phase {
                TagPhase::VoteInitiate if expired(st.started) => {
                    late.extend(st.voters.iter().copied().filter(|p| !st.init_votes.contains_key(p)));
                }
                TagPhase::VoteComplete if st.first_complete.is_some_and(expired) => {
                    late.extend(st.tally.as_ref().unwrap().missing());
                }
                _ => {}
            }
        }
        self.kick(late.into_iter().collect(), "collective vote", now);
        if let Some(t) = self.pending.started {
            if expired(t) {
                let late: Vec<u64> = self
                    .accepted()
                    .into_iter()
                    .filter(|p| !self.pending.queried.contains_key(p))
                    .collect();
                self.kick(late, "pending-peers query", now);
            }
        }
    }
}
